use feedloop::feedback::{classify, estimate_prior, Category, Feedback, FeedbackDistribution, Status};
use feedloop::sandbox::{ExecutionResult, Session};
use feedloop::search::info_gain;
use proptest::prelude::*;

fn feedback_of(category: usize) -> Feedback {
    match Category::ALL[category] {
        Category::SuccessWithValue => Feedback { v: Some(1.0), sigma: "int".into(), delta: "1\n".into(), status: Status::Success },
        Category::SuccessNoValue => Feedback::text_only(),
        Category::RecoverableError => Feedback::error("NameError", "name 'x' is not defined", Status::RecoverableError),
        Category::FatalError => Feedback::error("MemoryError", "", Status::FatalError),
        Category::Timeout => Feedback::error("Timeout", "too slow", Status::Timeout),
    }
}

proptest! {
    #[test]
    fn prior_is_a_smoothed_distribution(cats in prop::collection::vec(0usize..5, 0..40), smoothing in 0.01f64..5.0) {
        let history: Vec<Feedback> = cats.iter().map(|&c| feedback_of(c)).collect();
        let prior = estimate_prior(&history, smoothing);
        let total: f64 = prior.weights().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let n = cats.len() as f64;
        for (i, w) in prior.weights().iter().enumerate() {
            let count = cats.iter().filter(|&&c| c == i).count() as f64;
            prop_assert!((w - (count + smoothing) / (n + 5.0 * smoothing)).abs() < 1e-12);
        }
    }

    #[test]
    fn gain_is_nonnegative_and_zero_on_self(a in prop::array::uniform5(0.001f64..1.0), b in prop::array::uniform5(0.001f64..1.0)) {
        let (p, q) = (FeedbackDistribution::from_counts(a).unwrap(), FeedbackDistribution::from_counts(b).unwrap());
        prop_assert!(info_gain(&p, &q) >= 0.0);
        prop_assert!(info_gain(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn classification_never_panics(stdout in ".{0,40}", exc in prop::option::of("[A-Za-z]{1,12}"), repr in prop::option::of(".{0,12}"), timed_out in any::<bool>()) {
        let raw = ExecutionResult { stdout, exception_name: exc.clone(), value_repr: repr, timed_out, ..ExecutionResult::default() };
        let f = classify(&raw);
        prop_assert_eq!(f.is_success(), exc.is_none() && !timed_out);
        if !f.is_success() {
            prop_assert!(f.sigma.starts_with("error:"));
            prop_assert_eq!(f.v, None);
        }
    }
}

#[test]
fn builtin_examples_classify_as_expected() {
    let mut s = Session::builtin();
    let f = s.run("k = 8\nresult = 2**(k - 1)\nprint(result)").unwrap();
    assert_eq!((f.v, f.sigma.as_str(), f.delta.as_str()), (Some(128.0), "int", "128\n"));
    assert_eq!(s.run("print((-1)**997)").unwrap().v, Some(-1.0));
    assert_eq!(s.run("(9 * 99 * (-1)) % 1000").unwrap().v, Some(109.0));
    let f = s.run("undefined_name + 1").unwrap();
    assert_eq!((f.sigma.as_str(), f.status), ("error:NameError", Status::RecoverableError));
}

#[test]
fn empty_history_is_uniform() {
    assert_eq!(estimate_prior(std::iter::empty(), 1.0), FeedbackDistribution::uniform());
}

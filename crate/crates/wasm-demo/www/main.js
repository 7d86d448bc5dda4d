import init, { parse_transcript, branch_value, run_scripted } from "./pkg/feedloop_wasm.js";

const $ = (id) => document.getElementById(id);

const TRANSCRIPT = `What is 2**7?
<|im_start|>think
Divide first.
<|execute|>
x = 128 / 0
<|execute_end|>
<|feedback|>
ZeroDivisionError: division by zero
<|feedback_end|>
Use the power directly.
<|execute|>
print(2**7)
<|execute_end|>
<|feedback|>
128
<|feedback_end|>
<|im_start|>answer
128`;

const VALUE_REQUEST = {
  history: [{ v: 8, sigma: "int", delta: "8\n", status: "success" }],
  action: "<|execute|>\nx = k / 0\n<|execute_end|>",
  feedback: { v: null, sigma: "error:ZeroDivisionError", delta: "ZeroDivisionError: division by zero", status: "recoverable_error" },
  config: { tau: -0.3 },
};

const RUN_REQUEST = {
  problem: "What is 2**7?",
  script: {
    actions: {
      set: "Set k.\n<|execute|>\nk = 8\n<|execute_end|>",
      bad: "Divide.\n<|execute|>\nx = k / 0\n<|execute_end|>",
      fix: "Compute the power instead.\n<|execute|>\nprint(2**(k-1))\n<|execute_end|>",
      alt: "Multiply.\n<|execute|>\nprint(k * 16)\n<|execute_end|>",
      ans: "So 128.\n<|im_start|>answer\n128",
    },
    states: { "": ["set"], set: ["bad", "alt"], "set/bad": ["fix"], "set/bad/fix": ["ans"], "set/alt": ["ans"] },
  },
  // A silent step scores 0, so the default threshold of 0.1 would prune "set".
  config: { tau: -0.3 },
};

function show(el, f) {
  el.classList.remove("err");
  try {
    f();
  } catch (e) {
    el.classList.add("err");
    el.textContent = String(e.message ?? e);
  }
}

function renderSegments(el, parsed) {
  el.replaceChildren();
  const head = document.createElement("div");
  head.textContent = `${parsed.segments.length} segments, round trip ${parsed.round_trip ? "exact" : "LOST"}`;
  el.append(head);
  for (const s of parsed.segments) {
    const line = document.createElement("div");
    line.className = `seg-${s.kind}`;
    line.textContent = `${s.kind}: ${JSON.stringify(s.body)}`;
    el.append(line);
  }
}

await init();

$("transcript").value = TRANSCRIPT;
$("value-req").value = JSON.stringify(VALUE_REQUEST, null, 2);
$("run-req").value = JSON.stringify(RUN_REQUEST, null, 2);

$("parse").onclick = () =>
  show($("parse-out"), () => renderSegments($("parse-out"), JSON.parse(parse_transcript($("transcript").value))));

$("value").onclick = () =>
  show($("value-out"), () => {
    $("value-out").textContent = JSON.stringify(JSON.parse(branch_value($("value-req").value)), null, 2);
  });

$("run").onclick = () =>
  show($("run-out"), () => {
    const req = JSON.parse($("run-req").value);
    req.config = { ...(req.config ?? {}), mode: $("mode").value };
    req.seed = Number($("seed").value) || 0;
    const out = JSON.parse(run_scripted(JSON.stringify(req)));
    const t = out.trajectory;
    $("run-out").textContent =
      `${t.terminal.kind} (success ${t.terminal.success}), ${t.steps.length} attempts, ` +
      `${t.tokens_used} tokens (approximate)\nsha256 ${out.hash}\n\n${out.transcript_with_abandoned}`;
  });

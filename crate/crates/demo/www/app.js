import init, { retrieve, nce, render_prompt } from "./pkg/zebra_demo.js";

const $ = (id) => document.getElementById(id);

const SAMPLE_KB = [
  { id: "kb-01", question: "Where do you wash dishes?", choices: ["sink", "garden", "closet"], answer: "A", explanations: ["Sinks have running water for washing."] },
  { id: "kb-02", question: "What do you use to draw a picture?", choices: ["pencil", "spoon", "pillow"], answer: "A", explanations: ["Pencils leave marks on paper."] },
  { id: "kb-03", question: "Where do bees live?", choices: ["hive", "cave", "boat"], answer: "A", explanations: ["Bees build hives to live in."] },
  { id: "kb-04", question: "Where would you rinse vegetables?", choices: ["bathtub", "sink", "oven"], answer: "B", explanations: ["Kitchen sinks are used to rinse food."] },
  { id: "kb-05", question: "What keeps milk cold?", choices: ["stove", "fridge", "drawer"], answer: "B", explanations: ["A fridge keeps food at a low temperature."] },
];

function fail(el, err) {
  el.innerHTML = "";
  const p = document.createElement("p");
  p.className = "err";
  p.textContent = String(err);
  el.appendChild(p);
}

function cell(row, text) {
  const td = document.createElement("td");
  td.textContent = text;
  row.appendChild(td);
}

function runRetrieve() {
  const out = $("retrieve-out");
  try {
    const res = JSON.parse(retrieve(
      $("kb").value, $("question").value, $("choices").value,
      Number($("k").value), Number($("dim").value), Number($("seed").value)));
    const table = document.createElement("table");
    table.innerHTML = "<tr><th>id</th><th>score</th><th>question</th><th>explanations</th></tr>";
    for (const h of res.hits) {
      const row = table.insertRow();
      cell(row, h.id);
      cell(row, h.score.toFixed(4));
      cell(row, h.question ?? "");
      cell(row, (h.explanations ?? []).join(" "));
    }
    const q = document.createElement("pre");
    q.textContent = res.query;
    out.replaceChildren(q, table);
  } catch (e) {
    fail(out, e);
  }
}

function runLoss() {
  const out = $("loss-out");
  try {
    const r = JSON.parse(nce($("pos").value, $("neg").value));
    const fmt = (xs) => xs.map((x) => x.toFixed(4)).join(", ") || "(none)";
    const pre = document.createElement("pre");
    pre.textContent = `loss      ${r.loss.toFixed(6)}\n` +
      `dL/d pos  ${fmt(r.d_pos)}\n` +
      `dL/d neg  ${fmt(r.d_neg)}`;
    out.replaceChildren(pre);
  } catch (e) {
    fail(out, e);
  }
}

function runPrompt() {
  const out = $("prompt-out");
  try {
    out.className = "";
    out.textContent = render_prompt($("kind").value, $("examples").value);
  } catch (e) {
    out.className = "err";
    out.textContent = String(e);
  }
}

await init();
$("kb").value = SAMPLE_KB.map((x) => JSON.stringify(x)).join("\n");
$("examples").value = [
  { id: "t", question: "Where would you rinse a dirty cup?", choices: ["sink", "garden", "closet"], answer: "A", explanations: ["Sinks supply running water."] },
  ...SAMPLE_KB.slice(0, 2),
].map((x) => JSON.stringify(x)).join("\n");

$("run-retrieve").addEventListener("click", runRetrieve);
for (const id of ["pos", "neg"]) $(id).addEventListener("input", runLoss);
for (const id of ["examples", "kind"]) $(id).addEventListener("input", runPrompt);
runRetrieve();
runLoss();
runPrompt();

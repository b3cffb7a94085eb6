import init, { tokenize, selectTokens, generate, correlations } from "./pkg/scene_demo.js";

const $ = (id) => document.getElementById(id);
let selection = null;

function run(f) {
  $("err").textContent = "";
  try {
    f();
  } catch (e) {
    $("err").textContent = e.message ?? String(e);
  }
}

function el(tag, text, cls) {
  const e = document.createElement(tag);
  if (text !== undefined) e.textContent = text;
  if (cls) e.className = cls;
  return e;
}

function showTokens() {
  const tokens = JSON.parse(tokenize($("text").value));
  const box = $("tokens");
  box.replaceChildren();
  tokens.forEach((t, i) => {
    const cell = el("span", t, "tok");
    const score = el("input");
    score.type = "number";
    score.step = "0.1";
    score.value = "0";
    score.dataset.pos = i;
    cell.append(score);
    box.append(cell);
  });
  selection = null;
  $("subs").replaceChildren();
  $("select-out").textContent = "";
}

function select() {
  const scores = [...$("tokens").querySelectorAll("input")].map((i) => Number(i.value) || 0);
  const out = JSON.parse(selectTokens(JSON.stringify({
    text: $("text").value,
    scores,
    v: Number($("v").value),
    rank_by_abs: $("abs").checked,
  })));
  const cells = $("tokens").children;
  const picked = new Set(out.selected.map((s) => s.position));
  [...cells].forEach((c, i) => {
    c.classList.toggle("ineligible", !out.eligible.includes(i));
    c.classList.toggle("selected", picked.has(i));
  });
  $("select-out").textContent =
    `eligible: ${out.eligible.length}, selected: ${out.selected.map((s) => `${out.tokens[s.position]} (${s.weight})`).join(", ")}` +
    (out.degenerate ? " (fewer eligible tokens than V)" : "");
  selection = out;
  const subs = $("subs");
  subs.replaceChildren();
  [...out.selected].sort((a, b) => a.position - b.position).forEach((s) => {
    const row = el("p", `${out.tokens[s.position]}: `);
    const input = el("input");
    input.type = "text";
    input.dataset.pos = s.position;
    row.append(input);
    subs.append(row);
  });
}

function sample() {
  if (!selection) throw new Error("select tokens first");
  const inputs = [...$("subs").querySelectorAll("input")];
  const out = JSON.parse(generate(JSON.stringify({
    text: $("text").value,
    positions: inputs.map((i) => Number(i.dataset.pos)),
    substitutes: inputs.map((i) => i.value.split(",").map((w) => w.trim()).filter(Boolean)),
    k: Number($("k").value),
    seed: Number($("seed").value),
  })));
  $("masked").textContent = out.masked;
  $("cfs").replaceChildren(...out.counterfactuals.map((cf) => {
    const flags = [cf.duplicate && "duplicate", cf.fallback && "fallback"].filter(Boolean);
    return el("li", cf.text + (flags.length ? `  [${flags.join(", ")}]` : ""));
  }));
}

function correlate() {
  const out = JSON.parse(correlations($("table").value));
  const table = el("table");
  const head = el("tr");
  head.append(el("th", "Method"));
  out.columns.forEach((c) => head.append(el("th", `${c.label} ${c.higher_is_better ? "↑" : "↓"}`)));
  table.append(head);
  out.rows.forEach((r) => {
    const tr = el("tr");
    tr.append(el("td", r.method));
    r.values.forEach((v) => tr.append(el("td", v.toFixed(6))));
    table.append(tr);
  });
  const rho = el("table");
  rho.append(el("tr"));
  rho.firstChild.append(el("th", "Metric"), el("th", "ρ vs Human Agreement"));
  out.correlations.forEach((c) => {
    const tr = el("tr");
    tr.append(el("td", c.label), el("td", c.spearman_rho === null ? "n/a" : c.spearman_rho.toFixed(6)));
    rho.append(tr);
  });
  $("corr").replaceChildren(rho, el("p"), table);
}

await init();
$("tokenize").onclick = () => run(showTokens);
$("select").onclick = () => run(select);
$("generate").onclick = () => run(sample);
$("correlate").onclick = () => run(correlate);
run(showTokens);

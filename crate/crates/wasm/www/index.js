import init, { softMax, oneHotSplit, InterventionDemo } from "./pkg/hicem_wasm.js";

const $ = (id) => document.getElementById(id);
const fmt = (x) => x.toFixed(3);

function bar(p) {
  return `<span class="bar" style="width:${Math.round(p * 120)}px"></span> ${fmt(p)}`;
}

// soft maximum

const probs = [0.9, 0.3, 0.1];

function drawSoftMax() {
  const r = JSON.parse(softMax(new Float64Array(probs)));
  $("sm-prob").textContent = fmt(r.prob);
  $("sm-max").textContent = fmt(r.max);
  $("sm-mean").textContent = fmt(r.mean);
  $("sm-weights").innerHTML = r.weights.map((w, j) => `weight ${j}: ${bar(w)}`).join("<br>");
}

function buildSliders() {
  $("sliders").innerHTML = probs
    .map((p, j) => `<label>p${j} <input type="range" min="0" max="1" step="0.01" value="${p}" data-j="${j}"></label><br>`)
    .join("");
  for (const el of $("sliders").querySelectorAll("input")) {
    el.addEventListener("input", (e) => {
      probs[+e.target.dataset.j] = +e.target.value;
      drawSoftMax();
    });
  }
}

// one-hot splitting

function runOneHot() {
  $("oh-status").textContent = "training autoencoders...";
  setTimeout(() => {
    try {
      const r = JSON.parse(oneHotSplit(0, +$("oh-parents").value, +$("oh-subs").value, +$("oh-n").value, 60));
      $("oh-status").textContent = `${r.matched}/${r.bank_entries} matched, mean AUC ${fmt(r.mean_auc)}`;
      $("oh-table").innerHTML =
        "<tr><th>true sub-concept</th><th>AUC</th><th>discovered</th></tr>" +
        r.rows.rows
          .map((row) => `<tr><td>${row.bank}</td><td>${row.match_auc == null ? "-" : fmt(row.match_auc)}</td><td>${row.sub ?? "-"}</td></tr>`)
          .join("");
    } catch (e) {
      $("oh-status").textContent = String(e);
    }
  }, 10);
}

// interventions

let demo = null;
let toggles = new Map(); // key -> intervention record

function keyOf(iv) {
  return iv.level === "top" ? `top:${iv.concept}` : `sub:${iv.sub}`;
}

function apply() {
  const id = +$("iv-sample").value;
  const body = JSON.stringify({ interventions: [...toggles.values()] });
  let p;
  try {
    p = JSON.parse(toggles.size ? demo.intervene(id, body) : demo.prediction(id));
  } catch (e) {
    $("iv-task").textContent = String(e);
    return;
  }
  const ok = p.task.predicted === p.task.truth ? "correct" : "wrong";
  $("iv-task").innerHTML = `predicted sum <b>${p.task.predicted}</b>, true ${p.task.truth} (${ok}); true values: ${p.bank.join(", ")}`;
  $("iv-tree").innerHTML = p.concepts.map(renderConcept).join("");
  for (const b of $("iv-tree").querySelectorAll("button")) {
    b.addEventListener("click", () => {
      const iv = JSON.parse(b.dataset.iv);
      const k = keyOf(iv);
      const same = toggles.get(k);
      if (same && same.present === iv.present) toggles.delete(k);
      else toggles.set(k, iv);
      apply();
    });
  }
}

function toggleButtons(iv) {
  return ["present", "absent"]
    .map((label) => {
      const rec = { ...iv, present: label === "present" };
      const on = toggles.get(keyOf(rec))?.present === rec.present;
      return `<button data-iv='${JSON.stringify(rec)}'>${on ? "[" + label + "]" : label}</button>`;
    })
    .join("");
}

function renderSubs(concept, subs) {
  return subs
    .map((s) => {
      const cls = s.intervened ? "forced" : "";
      return `<li class="${cls}">${s.id}: ${bar(s.prob)} ${toggleButtons({ level: "sub", concept, sub: s.id })}</li>`;
    })
    .join("");
}

function renderConcept(c) {
  const cls = c.intervened ? "forced" : "";
  return `<div><span class="${cls}"><b>${c.name}</b> ${bar(c.prob)}</span> (true: ${c.truth})
    ${toggleButtons({ level: "top", concept: c.name })}
    <ul><li>positive<ul>${renderSubs(c.name, c.positive)}</ul></li>
        <li>negative<ul>${renderSubs(c.name, c.negative)}</ul></li></ul></div>`;
}

function trainDemo() {
  $("iv-status").textContent = "training...";
  setTimeout(() => {
    try {
      demo = new InterventionDemo(0, 1500, 60);
    } catch (e) {
      $("iv-status").textContent = String(e);
      return;
    }
    const s = JSON.parse(demo.samples(0, 40));
    $("iv-sample").innerHTML = s.samples.map((r) => `<option value="${r.id}">#${r.id} (sum ${r.task})</option>`).join("");
    $("iv-status").textContent = "ready";
    $("iv-body").hidden = false;
    toggles = new Map();
    apply();
  }, 10);
}

await init();
buildSliders();
drawSoftMax();
$("oh-run").addEventListener("click", runOneHot);
$("iv-train").addEventListener("click", trainDemo);
$("iv-sample").addEventListener("change", () => {
  toggles = new Map();
  apply();
});
$("iv-reset").addEventListener("click", () => {
  toggles = new Map();
  apply();
});

import init, { crop, parse_caption, train_blocks } from "./pkg/condsim_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function showError(el, e) {
  el.textContent = String(e);
  el.className = "err";
}

function drawCrop() {
  const out = $("crop-out");
  const ctx = $("crop-canvas").getContext("2d");
  ctx.clearRect(0, 0, 640, 480);
  const box = [num("cx"), num("cy"), num("cw"), num("ch")];
  ctx.strokeStyle = "#1565c0";
  ctx.lineWidth = 2;
  ctx.strokeRect(...box);
  let c;
  try {
    c = JSON.parse(crop(...box, 640, 480, num("cd")));
  } catch (e) {
    return showError(out, e);
  }
  ctx.fillStyle = "rgba(255, 152, 0, 0.15)";
  ctx.fillRect(c.x - c.pad_left, c.y - c.pad_top, c.w + c.pad_left + c.pad_right, c.h + c.pad_top + c.pad_bottom);
  ctx.strokeStyle = "#e65100";
  ctx.setLineDash([6, 4]);
  ctx.strokeRect(c.x, c.y, c.w, c.h);
  ctx.setLineDash([]);
  out.className = "";
  out.textContent = JSON.stringify(c, null, 1);
}

function parse() {
  const table = $("rels");
  const threshold = num("threshold");
  let p;
  try {
    p = JSON.parse(parse_caption($("caption").value, threshold));
  } catch (e) {
    return showError($("rels-summary"), e);
  }
  table.innerHTML = "<tr><th>subject</th><th>predicate</th><th>object</th><th>concreteness</th><th>kept</th></tr>";
  for (const r of p.relationships) {
    const row = table.insertRow();
    const c = r.concreteness;
    for (const v of [r.subject, r.predicate, r.object, c.toFixed(2), c >= threshold ? "yes" : "no"]) {
      row.insertCell().textContent = v;
    }
  }
  $("rels-summary").className = "";
  $("rels-summary").textContent = `${p.relationships.length} relationships, ${p.kept} kept`;
}

function plotLoss(losses, validation, steps) {
  const cv = $("loss-canvas");
  const ctx = cv.getContext("2d");
  const [W, H, pad] = [cv.width, cv.height, 30];
  ctx.clearRect(0, 0, W, H);
  const hi = Math.max(...losses), lo = Math.min(...losses);
  const x = (i) => pad + (i / Math.max(steps, 1)) * (W - 2 * pad);
  const y = (v) => H - pad - ((v - lo) / (hi - lo || 1)) * (H - 2 * pad);
  ctx.strokeStyle = "#1565c0";
  ctx.beginPath();
  losses.forEach((l, i) => (i ? ctx.lineTo(x(i + 1), y(l)) : ctx.moveTo(x(1), y(l))));
  ctx.stroke();
  ctx.fillStyle = "#e65100";
  for (const [s, r] of validation) {
    ctx.fillRect(x(s) - 2, H - pad - r * (H - 2 * pad) - 2, 4, 4);
  }
  ctx.fillStyle = "#222";
  ctx.fillText(`loss ${hi.toFixed(3)} → ${losses[losses.length - 1].toFixed(3)}`, pad, 14);
  ctx.fillStyle = "#e65100";
  ctx.fillText("validation R@1 (0 to 1)", W - pad - 130, 14);
}

function train() {
  const status = $("train-status");
  status.className = "";
  status.textContent = "training…";
  $("train").disabled = true;
  // Let the status paint before the blocking run.
  setTimeout(() => {
    try {
      const t0 = performance.now();
      const r = JSON.parse(train_blocks(num("steps"), num("batch"), num("lr"), BigInt(num("seed"))));
      plotLoss(r.losses, r.validation, num("steps"));
      const table = $("recall");
      table.innerHTML = "<tr><th>scorer</th><th>R@1</th></tr>";
      for (const [name, v] of r.recall) {
        const row = table.insertRow();
        row.insertCell().textContent = name;
        row.insertCell().textContent = (100 * v).toFixed(1) + "%";
      }
      status.textContent = `${r.templates} validation templates, best step ${r.best_step}, ${((performance.now() - t0) / 1000).toFixed(1)} s`;
    } catch (e) {
      showError(status, e);
    } finally {
      $("train").disabled = false;
    }
  }, 20);
}

await init();
for (const id of ["cx", "cy", "cw", "ch", "cd"]) $(id).addEventListener("input", drawCrop);
$("caption").addEventListener("input", parse);
$("threshold").addEventListener("input", parse);
$("train").addEventListener("click", train);
drawCrop();
parse();

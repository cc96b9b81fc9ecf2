import init, { equivariance, commutation, synchrony } from "./pkg/coattn_demo.js";

const $ = (id) => document.getElementById(id);

function heat(canvas, rows, cell) {
  const n = rows.length, m = rows[0].length;
  canvas.width = m * cell;
  canvas.height = n * cell;
  const ctx = canvas.getContext("2d");
  const peak = Math.max(1e-12, ...rows.flat().map(Math.abs));
  rows.forEach((row, i) => row.forEach((v, j) => {
    const t = Math.min(1, Math.abs(v) / peak);
    const c = Math.round(255 * (1 - t));
    ctx.fillStyle = v >= 0 ? `rgb(255,${c},${c})` : `rgb(${c},${c},255)`;
    ctx.fillRect(j * cell, i * cell, cell, cell);
  }));
}

function plane(canvas, flat, side, cell) {
  const rows = [];
  for (let i = 0; i < side; i++) rows.push(flat.slice(i * side, (i + 1) * side));
  heat(canvas, rows, cell);
}

const fmt = (v) => v.toExponential(2);
const cls = (ok) => (ok ? "ok" : "bad");

function drawEquivariance() {
  const v = JSON.parse(equivariance($("eq-kind").value, Number($("eq-seed").value)));
  heat($("eq-matrix"), v.matrix, 24);
  const head = "<tr><th>g</th><th>attend(P_g x)</th><th>P_g attend(x)</th><th>max dev</th></tr>";
  const body = v.rows.map((r) =>
    `<tr><td>${r.element}</td><td>${r.attend_moved.map((x) => x.toFixed(3)).join(" ")}</td>` +
    `<td>${r.moved_attend.map((x) => x.toFixed(3)).join(" ")}</td>` +
    `<td class="${cls(r.deviation <= 1e-12)}">${fmt(r.deviation)}</td></tr>`).join("");
  $("eq-table").innerHTML = head + body;
  const ok = v.max_deviation <= 1e-12;
  $("eq-summary").innerHTML = `on ${v.group}: <b class="${cls(ok)}">${ok ? "equivariant" : "not equivariant"}</b> (max deviation ${fmt(v.max_deviation)})`;
}

function drawCommutation() {
  const eps = Number($("cm-eps").value);
  $("cm-eps-val").textContent = eps.toFixed(2);
  const v = JSON.parse(commutation(Number($("cm-seed").value), eps));
  heat($("cm-matrix"), v.matrix, 20);
  $("cm-table").innerHTML = "<tr><th>g</th><th>max |P_g Ã − Ã P_g|</th></tr>" +
    v.elements.map((g, i) => `<tr><td>${g}</td><td class="${cls(v.deviations[i] <= 1e-12)}">${fmt(v.deviations[i])}</td></tr>`).join("");
}

function drawSynchrony() {
  const v = JSON.parse(synchrony(Number($("sy-seed").value), Number($("sy-k").value)));
  plane($("sy-img"), v.image, v.side, 8);
  plane($("sy-rot"), v.rotated, v.side, 8);
  const host = $("sy-stages");
  host.innerHTML = "";
  v.stages.forEach((name, s) => {
    const block = document.createElement("div");
    block.innerHTML = `<h3 style="font-size:1em">${name}</h3>`;
    for (const [label, stacks] of [["upright", v.base], ["rotated, undone", v.moved]]) {
      const row = document.createElement("div");
      row.className = "row";
      stacks[s].forEach((p, o) => {
        const fig = document.createElement("figure");
        const c = document.createElement("canvas");
        plane(c, p, v.side, 6);
        fig.append(c);
        fig.insertAdjacentHTML("beforeend", `<figcaption>${label}, r${o}</figcaption>`);
        row.append(fig);
      });
      block.append(row);
    }
    host.append(block);
  });
  const ok = v.mismatches === 0 && !v.inconclusive;
  $("sy-summary").innerHTML = `<b class="${cls(ok)}">${v.inconclusive ? "inconclusive" : `${v.mismatches} channel mismatches`}</b> across all four rotations`;
}

await init();
$("eq-kind").onchange = drawEquivariance;
$("eq-seed").oninput = drawEquivariance;
$("eq-new").onclick = () => { $("eq-seed").value = Number($("eq-seed").value) + 1; drawEquivariance(); };
$("cm-eps").oninput = drawCommutation;
$("cm-seed").oninput = drawCommutation;
$("sy-k").onchange = drawSynchrony;
$("sy-seed").oninput = drawSynchrony;
drawEquivariance();
drawCommutation();
drawSynchrony();

import init, { render_sphere, render_figure, brdf_slice } from "./pkg/scatter_avatar_wasm.js";

const $ = (id) => document.getElementById(id);

function blit(canvas, rgba) {
  const ctx = canvas.getContext("2d");
  const img = new ImageData(new Uint8ClampedArray(rgba), canvas.width, canvas.height);
  ctx.putImageData(img, 0, 0);
}

function timed(statusId, fn) {
  const t0 = performance.now();
  try {
    fn();
    $(statusId).textContent = `${(performance.now() - t0).toFixed(0)} ms`;
  } catch (e) {
    $(statusId).textContent = String(e);
  }
}

function hexToRgb(hex) {
  const v = parseInt(hex.slice(1), 16);
  return [(v >> 16) & 255, (v >> 8) & 255, v & 255].map((c) => (c / 255) ** 2.2);
}

function drawSphere() {
  const [r, g, b] = hexToRgb($("albedo").value);
  timed("sphere-status", () =>
    blit($("sphere"), render_sphere(64, r, g, b, +$("roughness").value, +$("metallic").value,
      +$("azimuth").value, +$("elevation").value)));
}

function drawFigure() {
  timed("figure-status", () =>
    blit($("figure"), render_figure(64, +$("arm").value, +$("view").value, $("mode").value)));
}

function drawBrdf() {
  const canvas = $("brdf");
  const ctx = canvas.getContext("2d");
  const values = brdf_slice(+$("b-roughness").value, +$("b-metallic").value, +$("b-view").value, 361);
  const peak = Math.max(...values, 1e-6);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#333";
  ctx.beginPath();
  ctx.moveTo(canvas.width / 2, 0);
  ctx.lineTo(canvas.width / 2, canvas.height);
  ctx.stroke();
  ctx.strokeStyle = "#f0a040";
  ctx.beginPath();
  values.forEach((v, i) => {
    const x = (i / (values.length - 1)) * canvas.width;
    const y = canvas.height - 10 - (v / peak) * (canvas.height - 20);
    i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  });
  ctx.stroke();
  ctx.fillStyle = "#9aa";
  ctx.fillText(`peak ${peak.toFixed(3)}`, 8, 14);
}

await init();
for (const id of ["albedo", "roughness", "metallic", "azimuth", "elevation"]) $(id).addEventListener("change", drawSphere);
for (const id of ["arm", "view", "mode"]) $(id).addEventListener("change", drawFigure);
for (const id of ["b-roughness", "b-metallic", "b-view"]) $(id).addEventListener("input", drawBrdf);
drawSphere();
drawFigure();
drawBrdf();

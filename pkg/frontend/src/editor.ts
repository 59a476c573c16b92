/** Canvas rendering and brush interaction for the pixel editor.
 *
 * Rendering is nearest-neighbor (imageSmoothingEnabled off, integer scale)
 * so raters and editors see exact pixels, never interpolated ones.
 */

import { quantize } from "./norms.js";
import type { SessionController } from "./session.js";
import type { ImagePayload } from "./types.js";

export const SCALE = 12;

export function drawPixels(canvas: HTMLCanvasElement, width: number,
                           height: number, intensities: ArrayLike<number>): void {
  canvas.width = width * SCALE;
  canvas.height = height * SCALE;
  const ctx = canvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;
  const small = new OffscreenCanvas(width, height);
  const sctx = small.getContext("2d")!;
  const img = sctx.createImageData(width, height);
  for (let i = 0; i < width * height; i++) {
    const byte = quantize(intensities[i]!);
    img.data[4 * i] = byte;
    img.data[4 * i + 1] = byte;
    img.data[4 * i + 2] = byte;
    img.data[4 * i + 3] = 255;
  }
  sctx.putImageData(img, 0, 0);
  ctx.drawImage(small, 0, 0, canvas.width, canvas.height);
}

export function drawImagePayload(canvas: HTMLCanvasElement, image: ImagePayload): void {
  const floats = Array.from(image.pixels, (b) => b / 255);
  drawPixels(canvas, image.width, image.height, floats);
}

export function pixelAt(canvas: HTMLCanvasElement, width: number,
                        ev: MouseEvent): number | null {
  const rect = canvas.getBoundingClientRect();
  const col = Math.floor((ev.clientX - rect.left) / SCALE);
  const row = Math.floor((ev.clientY - rect.top) / SCALE);
  if (col < 0 || row < 0 || col >= width || row >= canvas.height / SCALE) return null;
  return row * width + col;
}

export interface MeterElements {
  l0: HTMLElement;
  linf: HTMLElement;
  budget: HTMLElement;
}

/** Both norms are always displayed, whatever the session's constraint is. */
export function renderMeter(els: MeterElements, ctl: SessionController): void {
  const use = ctl.meter();
  els.l0.textContent = `${use.l0} px`;
  els.linf.textContent = use.linf.toFixed(4);
  const over = ctl.norm === "l0"
    ? use.l0 > ctl.epsilon
    : use.linf > ctl.epsilon + 1e-12;
  els.budget.textContent = ctl.norm === "l0"
    ? `${use.l0} / ${ctl.epsilon} px`
    : `${use.linf.toFixed(3)} / ${ctl.epsilon}`;
  els.budget.classList.toggle("over", over);
}

export function flashBudget(els: MeterElements): void {
  els.budget.classList.remove("flash");
  // restart the CSS animation
  void els.budget.offsetWidth;
  els.budget.classList.add("flash");
}

export function attachBrush(
  canvas: HTMLCanvasElement,
  ctl: SessionController,
  intensityOf: () => number,
  onStroke: (result: { ok: boolean; rolledBack: boolean; blockedLocally?: boolean }) => void,
): () => void {
  let painting = false;
  let pending: Map<number, number> = new Map();

  const flush = async () => {
    if (pending.size === 0) return;
    const stroke: [number, number][] = [...pending.entries()];
    pending = new Map();
    const result = await ctl.tryStroke(stroke);
    onStroke(result);
  };

  const paint = (ev: MouseEvent) => {
    const pixel = pixelAt(canvas, ctl.width, ev);
    if (pixel !== null) pending.set(pixel, intensityOf());
  };

  const down = (ev: MouseEvent) => { painting = true; paint(ev); };
  const move = (ev: MouseEvent) => { if (painting) paint(ev); };
  const up = () => { if (painting) { painting = false; void flush(); } };

  canvas.addEventListener("mousedown", down);
  canvas.addEventListener("mousemove", move);
  window.addEventListener("mouseup", up);
  return () => {
    canvas.removeEventListener("mousedown", down);
    canvas.removeEventListener("mousemove", move);
    window.removeEventListener("mouseup", up);
  };
}

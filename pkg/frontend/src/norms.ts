/** Client-side norm accounting that mirrors the server bit for bit.
 *
 * The server stores dataset pixels as float32(byte/255) and compares in
 * float64; reproducing that exactly (Math.fround for the float32 rounding,
 * floor(x*255 + 0.5) for quantization) keeps the budget meter in lockstep
 * with server-side recomputation instead of merely close to it.
 */

import type { Norm } from "./types.js";

export function byteToFloat(byte: number): number {
  return Math.fround(byte / 255);
}

export function quantize(value: number): number {
  return Math.floor(value * 255 + 0.5);
}

export function baseFloats(baseBytes: ArrayLike<number>): Float64Array {
  const out = new Float64Array(baseBytes.length);
  for (let i = 0; i < baseBytes.length; i++) out[i] = byteToFloat(baseBytes[i]!);
  return out;
}

export function l0Used(base: Float64Array, current: Float64Array): number {
  let count = 0;
  for (let i = 0; i < base.length; i++) {
    if (quantize(base[i]!) !== quantize(current[i]!)) count++;
  }
  return count;
}

export function linfUsed(base: Float64Array, current: Float64Array): number {
  let worst = 0;
  for (let i = 0; i < base.length; i++) {
    const d = Math.abs(current[i]! - base[i]!);
    if (d > worst) worst = d;
  }
  return worst;
}

export interface BudgetUsage {
  l0: number;
  linf: number;
}

export function usage(base: Float64Array, current: Float64Array): BudgetUsage {
  return { l0: l0Used(base, current), linf: linfUsed(base, current) };
}

export function withinBudget(norm: Norm, epsilon: number, use: BudgetUsage): boolean {
  if (norm === "l0") return use.l0 <= Math.trunc(epsilon);
  return use.linf <= epsilon + 1e-12;
}

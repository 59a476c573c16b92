import { describe, expect, it } from "vitest";

import {
  baseFloats, byteToFloat, l0Used, linfUsed, quantize, usage, withinBudget,
} from "../src/norms.js";

describe("quantize", () => {
  it("rounds half up like the server", () => {
    expect(quantize(0.5)).toBe(128);
    expect(quantize(0)).toBe(0);
    expect(quantize(1)).toBe(255);
    expect(quantize(127.49 / 255)).toBe(127);
  });

  it("round-trips every byte", () => {
    for (let b = 0; b <= 255; b++) {
      expect(quantize(byteToFloat(b))).toBe(b);
    }
  });
});

describe("byteToFloat", () => {
  it("mirrors the server float32 conversion", () => {
    // float32(128/255) differs from the double 128/255 in the 8th decimal
    expect(byteToFloat(128)).toBe(Math.fround(128 / 255));
    expect(byteToFloat(128)).not.toBe(128 / 255);
  });
});

describe("budget accounting", () => {
  const base = baseFloats([0, 128, 255, 10]);

  it("fresh buffer uses nothing", () => {
    const use = usage(base, base.slice());
    expect(use.l0).toBe(0);
    expect(use.linf).toBe(0);
  });

  it("counts quantized pixel changes for l0", () => {
    const current = base.slice();
    current[0] = 0.9;
    current[1] = byteToFloat(128) + 0.001; // same byte after quantization
    expect(l0Used(base, current)).toBe(1);
  });

  it("tracks the max absolute change for linf", () => {
    const current = base.slice();
    current[0] = 0.25;
    current[2] = byteToFloat(255) - 0.5;
    expect(linfUsed(base, current)).toBeCloseTo(0.5, 12);
  });

  it("applies the right comparison per norm", () => {
    expect(withinBudget("l0", 1, { l0: 1, linf: 0.9 })).toBe(true);
    expect(withinBudget("l0", 1, { l0: 2, linf: 0.0 })).toBe(false);
    expect(withinBudget("linf", 0.4, { l0: 99, linf: 0.4 })).toBe(true);
    expect(withinBudget("linf", 0.4, { l0: 0, linf: 0.41 })).toBe(false);
  });
});

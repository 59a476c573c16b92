import { describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";
import { byteToFloat, quantize } from "../src/norms.js";
import { SessionController } from "../src/session.js";
import type { EditResponse, SessionView } from "../src/types.js";

/** In-memory stand-in for the service with the same budget semantics. */
class FakeApi {
  base: Float64Array;
  current: Float64Array;
  revision = 0;
  log: [number, number, number, number][] = [];
  requests = 0;

  constructor(readonly baseBytes: number[], readonly norm: "l0" | "linf",
              readonly epsilon: number) {
    this.base = new Float64Array(baseBytes.map(byteToFloat));
    this.current = this.base.slice();
  }

  private view(): SessionView {
    return {
      id: "s00000", base_index: 0, label: 3, norm: this.norm,
      epsilon: this.epsilon, revision: this.revision,
      width: 2, height: 2,
      base_pixels: this.baseBytes,
      pixels: [...this.current].map(quantize),
      l0_used: this.l0(), linf_used: this.linf(),
      edit_log: this.log,
    };
  }

  private l0(): number {
    let n = 0;
    for (let i = 0; i < this.base.length; i++) {
      if (quantize(this.base[i]!) !== quantize(this.current[i]!)) n++;
    }
    return n;
  }

  private linf(): number {
    let m = 0;
    for (let i = 0; i < this.base.length; i++) {
      m = Math.max(m, Math.abs(this.current[i]! - this.base[i]!));
    }
    return m;
  }

  async createSession(): Promise<SessionView> {
    return this.view();
  }

  async getSession(): Promise<SessionView> {
    return this.view();
  }

  async applyEdits(_id: string, edits: [number, number][],
                   revision?: number): Promise<EditResponse> {
    this.requests++;
    if (revision !== undefined && revision !== this.revision) {
      throw new ApiError(409, "stale_session", "stale");
    }
    const candidate = this.current.slice();
    for (const [p, v] of edits) candidate[p] = v;
    const saved = this.current;
    this.current = candidate;
    const over = this.norm === "l0"
      ? this.l0() > this.epsilon
      : this.linf() > this.epsilon + 1e-12;
    if (over) {
      this.current = saved;
      throw new ApiError(409, "budget_exceeded", "over budget");
    }
    for (const [p, v] of edits) this.log.push([p, saved[p]!, v, 0]);
    this.revision++;
    const v = this.view();
    return { revision: v.revision, l0_used: v.l0_used, linf_used: v.linf_used,
             pixels: v.pixels };
  }

  async saveExample(): Promise<never> {
    throw new Error("not needed here");
  }
}

async function makeController(norm: "l0" | "linf", epsilon: number) {
  const fake = new FakeApi([0, 64, 128, 255], norm, epsilon);
  const ctl = await SessionController.create(
    fake as unknown as ApiClient, 0, norm, epsilon);
  return { fake, ctl };
}

describe("SessionController", () => {
  it("applies strokes optimistically and keeps the meter in sync", async () => {
    const { fake, ctl } = await makeController("linf", 0.5);
    const result = await ctl.sendStroke([[0, 0.25], [1, byteToFloat(64) + 0.1]]);
    expect(result.ok).toBe(true);
    expect(ctl.meter().l0).toBe(2);
    expect(ctl.meterDisagreements).toBe(0);
    expect(ctl.revision).toBe(1);
    expect(fake.requests).toBe(1);
  });

  it("rolls back on budget rejection and counts it", async () => {
    const { fake, ctl } = await makeController("linf", 0.4);
    const before = ctl.current.slice();
    const result = await ctl.sendStroke([[0, 0.5]]); // 0.5 > 0.4 from byte 0
    expect(result.ok).toBe(false);
    expect(result.rolledBack).toBe(true);
    expect(ctl.rollbacks).toBe(1);
    expect([...ctl.current]).toEqual([...before]);
    expect(fake.revision).toBe(0);
  });

  it("zero-change strokes never reach the wire", async () => {
    const { fake, ctl } = await makeController("linf", 0.4);
    const result = await ctl.sendStroke([[1, byteToFloat(64)]]);
    expect(result.ok).toBe(true);
    expect(fake.requests).toBe(0);
  });

  it("advisory gate blocks without a request, raw send does not", async () => {
    const { fake, ctl } = await makeController("linf", 0.4);
    const gated = await ctl.tryStroke([[0, 0.9]]);
    expect(gated.blockedLocally).toBe(true);
    expect(fake.requests).toBe(0);
    const raw = await ctl.sendStroke([[0, 0.9]]);
    expect(raw.rolledBack).toBe(true);
    expect(fake.requests).toBe(1);
  });

  it("undo restores the exact pre-stroke pixels via inverse edits", async () => {
    const { ctl } = await makeController("linf", 0.6);
    const start = ctl.current.slice();
    await ctl.sendStroke([[0, 0.2]]);
    await ctl.sendStroke([[1, 0.5], [2, byteToFloat(128) - 0.3]]);
    await ctl.sendStroke([[3, byteToFloat(255) - 0.55]]);
    expect(await ctl.undo().then((r) => r.ok)).toBe(true);
    expect(await ctl.undo().then((r) => r.ok)).toBe(true);
    // back to the state after the first stroke only
    const expected = start.slice();
    expected[0] = 0.2;
    expect([...ctl.current]).toEqual([...expected]);
    expect(ctl.canUndo()).toBe(true);
  });

  it("resume rebuilds floats by replaying the server edit log", async () => {
    const { fake, ctl } = await makeController("l0", 3);
    await ctl.sendStroke([[0, 0.123456]]);
    await ctl.sendStroke([[2, 0.654321]]);
    const resumed = await SessionController.resume(
      fake as unknown as ApiClient, "s00000");
    expect([...resumed.current]).toEqual([...ctl.current]);
    expect(resumed.meter()).toEqual(ctl.meter());
  });

  it("l0 budget counts distinct quantized pixels", async () => {
    const { ctl } = await makeController("l0", 2);
    expect((await ctl.sendStroke([[0, 1.0], [1, 1.0]])).ok).toBe(true);
    expect((await ctl.sendStroke([[2, 1.0]])).rolledBack).toBe(true);
    // reverting pixel 0 frees budget for pixel 2
    expect((await ctl.sendStroke([[0, byteToFloat(0)]])).ok).toBe(true);
    expect((await ctl.sendStroke([[2, 1.0]])).ok).toBe(true);
    expect(ctl.meter().l0).toBe(2);
  });
});

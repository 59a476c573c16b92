/** Editing-session controller: optimistic strokes, rollback, undo.
 *
 * Strokes apply to the local pixel buffer immediately and go to the server
 * in the same breath; a BudgetExceeded (or stale-revision) response restores
 * the buffer from before the stroke. The server stays authoritative -- the
 * local meter exists so the UI can warn before sending, and every server
 * response is cross-checked against it.
 */

import { ApiError, ApiClient } from "./api.js";
import { baseFloats, usage, withinBudget, type BudgetUsage } from "./norms.js";
import type { Norm, SessionView } from "./types.js";

export type Stroke = Array<[pixel: number, intensity: number]>;

export interface StrokeResult {
  ok: boolean;
  rolledBack: boolean;
  /** Set when the advisory pre-check stopped the stroke before sending. */
  blockedLocally?: boolean;
  code?: string;
}

export class SessionController {
  readonly id: string;
  readonly norm: Norm;
  readonly epsilon: number;
  readonly width: number;
  readonly height: number;
  readonly base: Float64Array;

  current: Float64Array;
  revision: number;
  /** Budget rollbacks observed from the server, for the meter UI. */
  rollbacks = 0;
  /** Mismatches between the local meter and a server response (should stay 0). */
  meterDisagreements = 0;

  private undoStack: Stroke[] = [];

  private constructor(private api: ApiClient, view: SessionView) {
    this.id = view.id;
    this.norm = view.norm;
    this.epsilon = view.epsilon;
    this.width = view.width;
    this.height = view.height;
    this.base = baseFloats(view.base_pixels);
    this.current = baseFloats(view.pixels);
    this.revision = view.revision;
  }

  static async create(api: ApiClient, baseIndex: number, norm: Norm,
                      epsilon: number): Promise<SessionController> {
    return new SessionController(api, await api.createSession(baseIndex, norm, epsilon));
  }

  static async resume(api: ApiClient, id: string): Promise<SessionController> {
    const view = await api.getSession(id);
    const ctl = new SessionController(api, view);
    // quantization loses sub-byte detail; rebuild exact floats from the log
    ctl.current = baseFloats(view.base_pixels);
    for (const [pixel, , value] of view.edit_log ?? []) {
      ctl.current[pixel] = value;
    }
    return ctl;
  }

  meter(): BudgetUsage {
    return usage(this.base, this.current);
  }

  /** Would this stroke stay inside the budget? Advisory only. */
  strokeFits(stroke: Stroke): boolean {
    const candidate = this.current.slice();
    for (const [pixel, value] of stroke) candidate[pixel] = value;
    return withinBudget(this.norm, this.epsilon, usage(this.base, candidate));
  }

  /** Advisory-gated stroke: refuse locally rather than bother the server. */
  async tryStroke(stroke: Stroke): Promise<StrokeResult> {
    if (!this.strokeFits(stroke)) {
      return { ok: false, rolledBack: false, blockedLocally: true };
    }
    return this.sendStroke(stroke);
  }

  /** Optimistic stroke: apply locally, send, roll back if the server says no. */
  async sendStroke(stroke: Stroke): Promise<StrokeResult> {
    const effective = stroke.filter(([pixel, value]) => this.current[pixel] !== value);
    if (effective.length === 0) {
      return { ok: true, rolledBack: false }; // zero-change stroke: no request
    }
    const before = this.current.slice();
    for (const [pixel, value] of effective) this.current[pixel] = value;
    try {
      const resp = await this.api.applyEdits(this.id, effective, this.revision);
      this.revision = resp.revision;
      this.undoStack.push(effective.map(([p]) => [p, before[p]!]));
      const local = this.meter();
      if (resp.l0_used !== local.l0 || resp.linf_used !== local.linf) {
        this.meterDisagreements++;
      }
      return { ok: true, rolledBack: false };
    } catch (err) {
      this.current = before;
      if (err instanceof ApiError &&
          (err.code === "budget_exceeded" || err.code === "stale_session")) {
        if (err.code === "budget_exceeded") this.rollbacks++;
        return { ok: false, rolledBack: true, code: err.code };
      }
      throw err;
    }
  }

  canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  /** Revert the last stroke by sending its inverse edits. */
  async undo(): Promise<StrokeResult> {
    const inverse = this.undoStack.pop();
    if (!inverse) return { ok: false, rolledBack: false };
    const result = await this.sendStroke(inverse);
    if (result.ok) this.undoStack.pop(); // drop the redo entry sendStroke pushed
    else this.undoStack.push(inverse);
    return result;
  }

  async save(claimedLabel: number) {
    return this.api.saveExample(this.id, claimedLabel);
  }
}

/** Labeling-pass controller: fetch next item, vote, resume after refresh.
 *
 * The server never reveals whether an item is clean or crafted; this side
 * only tracks which item is on screen and blocks double votes before they
 * reach the wire (the server rejects them anyway).
 */

import { ApiClient, ApiError } from "./api.js";
import type { ImagePayload, VoteLabel } from "./types.js";

export interface CurrentItem {
  itemId: string;
  image: ImagePayload;
  remaining: number;
  total: number;
}

export class LabelingController {
  current: CurrentItem | null = null;
  done = false;
  votesCast = 0;
  private votedItems = new Set<string>();

  constructor(private api: ApiClient, readonly taskId: string,
              readonly rater: string) {}

  async advance(): Promise<CurrentItem | null> {
    const next = await this.api.nextItem(this.taskId, this.rater);
    if (next.done) {
      this.done = true;
      this.current = null;
      return null;
    }
    this.current = {
      itemId: next.item_id!,
      image: next.image!,
      remaining: next.remaining,
      total: next.total ?? next.remaining,
    };
    return this.current;
  }

  async vote(label: VoteLabel): Promise<boolean> {
    const item = this.current;
    if (!item || this.votedItems.has(item.itemId)) {
      return false; // duplicate blocked client-side
    }
    try {
      await this.api.submitVote(this.taskId, this.rater, item.itemId, label);
    } catch (err) {
      if (err instanceof ApiError && err.code === "duplicate_vote") {
        this.votedItems.add(item.itemId);
        await this.advance();
        return false;
      }
      throw err;
    }
    this.votedItems.add(item.itemId);
    this.votesCast++;
    await this.advance();
    return true;
  }

  /** Run a whole pass with a scripted labeler (testing, demos). */
  async runPass(label: (item: CurrentItem) => VoteLabel): Promise<number> {
    if (!this.current && !this.done) await this.advance();
    while (!this.done && this.current) {
      await this.vote(label(this.current));
    }
    return this.votesCast;
  }
}

/** Session progression: items in server order, resume at the first
 *  unanswered item, advance only on server acknowledgement. */

import { ItemView, Outcome, SessionData, StudyApi } from "./api";

export type Phase = "answering" | "submitting" | "done";

export class SessionState {
  readonly items: ItemView[];
  readonly participantHash: string;
  private answered: Set<string>;
  private submitting = false;

  constructor(
    private api: StudyApi,
    session: SessionData,
  ) {
    this.items = session.items;
    this.participantHash = session.participant_hash;
    this.answered = new Set(session.answered);
  }

  /** First unanswered item in server order, or null when finished. */
  current(): ItemView | null {
    for (const item of this.items) {
      if (!this.answered.has(item.item_id)) return item;
    }
    return null;
  }

  /** 1-based position of the current item, e.g. 3 of 18. */
  progress(): { position: number; total: number } {
    const idx = this.items.findIndex((i) => !this.answered.has(i.item_id));
    return {
      position: idx === -1 ? this.items.length : idx + 1,
      total: this.items.length,
    };
  }

  phase(): Phase {
    if (this.current() === null) return "done";
    return this.submitting ? "submitting" : "answering";
  }

  /** Submit the outcome for the current item. Resolves true when the
   *  session advanced (ack or already-recorded conflict); a rejected
   *  promise leaves the position unchanged for retry. Re-entrant calls
   *  while a submission is in flight are ignored. */
  async submit(outcome: Outcome): Promise<boolean> {
    const item = this.current();
    if (item === null || this.submitting) return false;
    this.submitting = true;
    try {
      await this.api.submitChoice(this.participantHash, item.item_id, outcome);
      this.answered.add(item.item_id);
      return true;
    } finally {
      this.submitting = false;
    }
  }
}

/** Typed client for the study service HTTP API. */

export interface NodeView {
  name: string;
  bbox: number[];
}

export interface ItemView {
  item_id: string;
  graph_id: string;
  question_id: string;
  question: string;
  answer: string;
  predicted: string;
  structural_type: string;
  semantic_type: string;
  nodes: NodeView[];
  edges: number[][];
  selected_a: number[];
  selected_b: number[];
}

export interface SessionData {
  participant_hash: string;
  items: ItemView[];
  answered: string[];
}

export type Outcome = "A" | "B" | "equally_good" | "equally_bad";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class StudyApi {
  constructor(
    private fetchFn: FetchLike,
    private base: string = "",
  ) {}

  async fetchSession(user: string): Promise<SessionData> {
    const res = await this.fetchFn(
      `${this.base}/api/session?user=${encodeURIComponent(user)}`,
    );
    if (!res.ok) {
      throw new ApiError(res.status, `session fetch failed (${res.status})`);
    }
    return (await res.json()) as SessionData;
  }

  /** Resolves to "recorded" on 200 and "duplicate" on 409 (both advance). */
  async submitChoice(
    participantHash: string,
    itemId: string,
    outcome: Outcome,
  ): Promise<"recorded" | "duplicate"> {
    const res = await this.fetchFn(`${this.base}/api/choice`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        participant_hash: participantHash,
        item_id: itemId,
        outcome,
      }),
    });
    if (res.status === 409) return "duplicate";
    if (!res.ok) {
      throw new ApiError(res.status, `choice rejected (${res.status})`);
    }
    return "recorded";
  }
}

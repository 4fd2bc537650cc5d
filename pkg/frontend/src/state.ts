import type { ExplorerState, HistoryPoint, ReconstructResponse } from "./types.js";
import { initialState } from "./types.js";

/**
 * Returns a human-readable problem description when the payload does not
 * look like a reconstruction result, or null when it is usable.
 */
export function validateResponse(payload: unknown): string | null {
  if (payload === null || typeof payload !== "object") return "response is not an object";
  const r = payload as Record<string, unknown>;
  if (typeof r.reconstruction !== "string") return "missing reconstruction image";
  if (!Array.isArray(r.path_mask) || r.path_mask.length === 0) return "missing path_mask";
  for (const row of r.path_mask) {
    if (!Array.isArray(row) || row.length !== 2 || row.some((v) => typeof v !== "boolean")) {
      return "path_mask rows must be [gradient, proximal] booleans";
    }
  }
  if (!Array.isArray(r.n_am) || r.n_am.length !== 2 || r.n_am.some((v) => typeof v !== "number")) {
    return "n_am must hold two counts";
  }
  if (typeof r.dynamic_gflops !== "number" || typeof r.static_gflops !== "number") {
    return "missing cost figures";
  }
  if (typeof r.model_id !== "string") return "missing model_id";
  return null;
}

/** Successful round trip: record the result and extend the history trail. */
export function applyResult(
  state: ExplorerState,
  payload: unknown,
  encoding: number[],
): ExplorerState {
  const problem = validateResponse(payload);
  if (problem !== null) {
    // Keep the previous result and trail; only surface the card.
    return { ...state, errorCard: `malformed server response: ${problem}`, banner: null };
  }
  const resp = payload as ReconstructResponse;
  const point: HistoryPoint = {
    encoding: [...encoding],
    psnr_db: typeof resp.psnr_db === "number" ? resp.psnr_db : null,
    dynamic_gflops: resp.dynamic_gflops,
  };
  return {
    ...state,
    lastResponse: resp,
    history: [...state.history, point],
    banner: null,
    errorCard: null,
  };
}

/** Transport failure: leave results and history alone, raise the banner. */
export function applyTransportFailure(state: ExplorerState, message: string): ExplorerState {
  return { ...state, banner: `request failed: ${message}` };
}

export type Listener = (state: ExplorerState) => void;

export class Store {
  private state: ExplorerState = initialState();
  private listeners: Listener[] = [];

  get(): ExplorerState {
    return this.state;
  }

  set(next: ExplorerState): void {
    this.state = next;
    for (const fn of this.listeners) fn(next);
  }

  update(fn: (s: ExplorerState) => ExplorerState): void {
    this.set(fn(this.state));
  }

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((f) => f !== fn);
    };
  }
}

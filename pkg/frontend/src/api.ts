import type { PresetsResponse, ReconstructRequest, ReconstructResponse } from "./types.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    message: string,
    public readonly status: number | null,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

/**
 * Thin JSON client for the reconstruction service. The fetch implementation
 * is injectable so tests can stub the transport without a server.
 */
export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  async presets(signal?: AbortSignal): Promise<PresetsResponse> {
    return this.request<PresetsResponse>("/presets", { method: "GET", signal });
  }

  async reconstruct(req: ReconstructRequest, signal?: AbortSignal): Promise<ReconstructResponse> {
    return this.request<ReconstructResponse>("/reconstruct", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
      signal,
    });
  }

  private async request<T>(path: string, init: RequestInit): Promise<T> {
    let resp: Response;
    try {
      resp = await this.fetchImpl(this.baseUrl + path, init);
    } catch (err) {
      if (err instanceof DOMException && err.name === "AbortError") throw err;
      throw new ApiError(err instanceof Error ? err.message : String(err), null);
    }
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = await resp.json();
        if (body && typeof body.detail === "string") detail = body.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(detail || `request failed with ${resp.status}`, resp.status);
    }
    return (await resp.json()) as T;
  }
}

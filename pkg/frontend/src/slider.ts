/**
 * Debounced dispatcher for slider movement. Rapid changes collapse into a
 * single request once the control has been quiet for `delayMs`, and a newly
 * fired request aborts any still-running predecessor so at most one is in
 * flight.
 */
export class DebouncedRequester<T> {
  private timer: ReturnType<typeof setTimeout> | null = null;
  private controller: AbortController | null = null;

  constructor(
    private readonly run: (value: T, signal: AbortSignal) => Promise<void>,
    private readonly delayMs: number = 150,
  ) {}

  change(value: T): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      this.fire(value);
    }, this.delayMs);
  }

  /** Dispatch immediately, superseding any in-flight request. */
  fire(value: T): void {
    if (this.controller !== null) this.controller.abort();
    const controller = new AbortController();
    this.controller = controller;
    void this.run(value, controller.signal)
      .catch(() => {
        // the runner reports its own failures; aborts are expected here
      })
      .finally(() => {
        if (this.controller === controller) this.controller = null;
      });
  }

  inFlight(): boolean {
    return this.controller !== null;
  }

  cancel(): void {
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    if (this.controller !== null) {
      this.controller.abort();
      this.controller = null;
    }
  }
}

/** 1 Hz polling loop; any endpoint failure flips the stale indicator and the
 * next successful sweep clears it. */

import type { ApiClient } from "./api.js";
import type { ConsoleStore } from "./state.js";

export const POLL_INTERVAL_MS = 1000;

export class Poller {
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private readonly api: ApiClient,
    private readonly store: ConsoleStore,
  ) {}

  async tick(): Promise<void> {
    try {
      const [queue, classes, status] = await Promise.all([
        this.api.queue(),
        this.api.classes(),
        this.api.status(),
      ]);
      if (!queue.ok || !classes.ok || !status.ok) {
        this.store.markStale();
        return;
      }
      this.store.applyPoll(queue.body, classes.body, status.body);
    } catch {
      this.store.markStale();
    }
  }

  start(): void {
    if (this.timer !== null) return;
    void this.tick();
    this.timer = setInterval(() => void this.tick(), POLL_INTERVAL_MS);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }
}

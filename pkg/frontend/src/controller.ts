/** Submission logic: optimistic flow with per-item in-flight serialization.
 *
 * Every click ends in exactly one of: tile removed (2xx, or 404/409 conflict
 * reconciliation), or tile re-enabled with a visible error note. Nothing is
 * dropped silently, and a second click while a request is in flight is a
 * no-op.
 */

import type { ApiClient } from "./api.js";
import type { ConsoleStore } from "./state.js";

export class ConsoleController {
  constructor(
    private readonly api: ApiClient,
    private readonly store: ConsoleStore,
  ) {}

  /** Returns true when a request was actually sent. */
  async submitLabel(id: number, rawLabel: string): Promise<boolean> {
    const label = rawLabel.trim();
    if (!label) {
      this.store.failSubmit(id, "label must not be empty");
      return false;
    }
    if (!this.store.beginSubmit(id)) return false;
    try {
      const res = await this.api.label(id, label);
      if (res.ok) {
        this.store.resolveItem(id);
        if (res.body.retrain_triggered) {
          const classes = (res.body.new_classes ?? []).join(", ") || label;
          this.store.showBanner(`retraining started: learning "${classes}"`);
        }
        return true;
      }
      if (res.status === 404 || res.status === 409) {
        // resolved elsewhere (or the run is simulated); reconcile by dropping
        this.store.resolveItem(id);
        return true;
      }
      this.store.failSubmit(id, res.body.error ?? `server said ${res.status}`);
      return true;
    } catch (err) {
      this.store.failSubmit(id, `network failure: ${String(err)}`);
      return true;
    }
  }

  /** Pre-register a class name so it appears in the dropdown immediately. */
  async addClass(rawName: string): Promise<string | null> {
    const name = rawName.trim();
    if (!name) return "class name must not be empty";
    const existing = this.store.state.classes.some((c) => c.name === name);
    if (existing) return `class "${name}" already exists`;
    try {
      const res = await this.api.registerClass(name);
      if (res.ok) return null;
      return res.body.error ?? `server said ${res.status}`;
    } catch (err) {
      return `network failure: ${String(err)}`;
    }
  }
}

/** Console state and its transitions.
 *
 * The one invariant that matters: a tile leaves the pending view only after a
 * 2xx labeling response or a 404/409 reconciliation — never because a poll
 * happened to race a submission. Items with a submission in flight are pinned
 * until their request settles.
 */

import type { ClassInfo, QueueItem, RunStatus } from "./api.js";

export interface ConsoleState {
  items: QueueItem[]; // pending, oldest first
  classes: ClassInfo[];
  status: RunStatus | null;
  inFlight: Set<number>;
  itemErrors: Map<number, string>;
  banner: string | null;
  stale: boolean;
}

export function initialState(): ConsoleState {
  return {
    items: [],
    classes: [],
    status: null,
    inFlight: new Set(),
    itemErrors: new Map(),
    banner: null,
    stale: false,
  };
}

export type Listener = (state: ConsoleState) => void;

export class ConsoleStore {
  readonly state: ConsoleState = initialState();
  private listeners: Listener[] = [];

  subscribe(fn: Listener): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn(this.state);
  }

  applyPoll(items: QueueItem[], classes: ClassInfo[], status: RunStatus): void {
    const fresh = new Map(items.map((it) => [it.id, it]));
    // pinned: in-flight items stay visible even if the server already
    // resolved them; their own response decides their fate
    const pinned = this.state.items.filter(
      (it) => this.state.inFlight.has(it.id) && !fresh.has(it.id),
    );
    const merged = [...items, ...pinned];
    merged.sort((a, b) => a.id - b.id);
    this.state.items = merged;
    this.state.classes = classes;
    this.state.status = status;
    this.state.stale = false;
    this.emit();
  }

  markStale(): void {
    this.state.stale = true;
    this.emit();
  }

  beginSubmit(id: number): boolean {
    if (this.state.inFlight.has(id)) return false; // double-click guard
    this.state.inFlight.add(id);
    this.state.itemErrors.delete(id);
    this.emit();
    return true;
  }

  /** 2xx or 404/409 reconciliation: the item is resolved, drop its tile. */
  resolveItem(id: number, note?: string): void {
    this.state.inFlight.delete(id);
    this.state.items = this.state.items.filter((it) => it.id !== id);
    this.state.itemErrors.delete(id);
    if (note) this.state.banner = note;
    this.emit();
  }

  /** Submission failed without resolving the item: re-enable its tile. */
  failSubmit(id: number, message: string): void {
    this.state.inFlight.delete(id);
    this.state.itemErrors.set(id, message);
    this.emit();
  }

  showBanner(text: string): void {
    this.state.banner = text;
    this.emit();
  }

  clearBanner(): void {
    this.state.banner = null;
    this.emit();
  }
}

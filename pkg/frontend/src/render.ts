/** DOM rendering: status header, retrain banner, and the pending-item grid.
 * Tiles re-render on every state change; a broken image falls back to a
 * placeholder tile that still carries the item id and controls. */

import type { ConsoleState } from "./state.js";
import type { ConsoleController } from "./controller.js";

export const NEW_CLASS_OPTION = "__new__";

export function formatCertainty(c: number): string {
  return c.toFixed(3);
}

export function classOptions(state: ConsoleState): string[] {
  return state.classes.map((c) => c.name);
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function renderStatus(state: ConsoleState, host: HTMLElement): void {
  host.textContent = "";
  const s = state.status;
  if (state.stale || !s) {
    const bad = el("span", "stale", "server unreachable - data may be stale");
    host.append(bad);
    if (!s) return;
  }
  const acc =
    s.last_stacked_accuracy == null ? "n/a" : s.last_stacked_accuracy.toFixed(3);
  host.append(
    el("span", "stat", `cycle ${s.cycle}`),
    el("span", "stat", `alpha ${s.alpha.toFixed(4)}`),
    el("span", "stat", `queue ${s.queue_depth}`),
    el("span", "stat", `stacked acc ${acc}`),
    el("span", "stat roster", `known: ${s.known_classes.join(", ")}`),
  );
  if (s.retraining) host.append(el("span", "stat retraining", "retraining..."));
}

export function renderBanner(state: ConsoleState, host: HTMLElement): void {
  host.textContent = "";
  if (!state.banner) {
    host.hidden = true;
    return;
  }
  host.hidden = false;
  host.append(el("span", undefined, state.banner));
  const close = el("button", "close", "dismiss");
  close.addEventListener("click", () => {
    host.hidden = true;
    host.textContent = "";
  });
  host.append(close);
}

function labelControl(
  itemId: number,
  suggested: string,
  state: ConsoleState,
  controller: ConsoleController,
): HTMLElement {
  const wrap = el("div", "label-control");
  const select = el("select");
  for (const name of classOptions(state)) {
    const opt = el("option", undefined, name);
    opt.value = name;
    if (name === suggested) opt.selected = true;
    select.append(opt);
  }
  const newOpt = el("option", undefined, "new class...");
  newOpt.value = NEW_CLASS_OPTION;
  select.append(newOpt);

  const newName = el("input", "new-class-name");
  newName.placeholder = "new class name";
  newName.hidden = true;
  select.addEventListener("change", () => {
    newName.hidden = select.value !== NEW_CLASS_OPTION;
  });

  const submit = el("button", "submit", "label");
  submit.disabled = state.inFlight.has(itemId);
  submit.addEventListener("click", () => {
    const label =
      select.value === NEW_CLASS_OPTION ? newName.value : select.value;
    void controller.submitLabel(itemId, label);
  });

  wrap.append(select, newName, submit);
  const err = state.itemErrors.get(itemId);
  if (err) wrap.append(el("span", "error", err));
  return wrap;
}

export function renderQueue(
  state: ConsoleState,
  host: HTMLElement,
  controller: ConsoleController,
): void {
  host.textContent = "";
  if (state.items.length === 0) {
    host.append(el("p", "empty", "no unknowns pending"));
    return;
  }
  for (const item of state.items) {
    const tile = el("div", "tile");
    tile.dataset.itemId = String(item.id);

    const img = el("img", "crop");
    img.alt = `item ${item.id}`;
    img.src = `data:image/png;base64,${item.image}`;
    img.addEventListener("error", () => {
      const placeholder = el("div", "crop placeholder", `item ${item.id}`);
      img.replaceWith(placeholder);
    });
    tile.append(img);

    tile.append(
      el("div", "certainty", `certainty ${formatCertainty(item.certainty)}`),
    );
    const bars = el("div", "scores");
    for (const s of item.member_top_scores) {
      const bar = el("div", "bar");
      bar.style.width = `${Math.round(s * 100)}%`;
      bar.title = s.toFixed(3);
      bars.append(bar);
    }
    tile.append(bars);
    tile.append(labelControl(item.id, item.suggested_label, state, controller));
    if (state.inFlight.has(item.id)) tile.classList.add("in-flight");
    host.append(tile);
  }
}

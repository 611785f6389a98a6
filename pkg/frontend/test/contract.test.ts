/** Console contract against a live labeling server.
 *
 * Spawns the real training/serving process on a small synthetic dataset, then
 * drives the console's poller/controller exactly as the browser would:
 *  - pending items appear in the console within 2 s of being flagged
 *  - a submitted label transitions the item server-side
 *  - the 20th label of a new class surfaces the retrain banner
 *  - double-submission sends exactly one mutation
 */

import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { ConsoleController } from "../src/controller.js";
import { Poller } from "../src/poller.js";
import { ConsoleStore } from "../src/state.js";

const PY = process.env.PYTHON ?? "python3";
const PORT = 8907;
const BASE = `http://127.0.0.1:${PORT}`;
const REPO = resolve(__dirname, "..", "..");

let serveProc: ChildProcess | null = null;
let workDir = "";

function cli(...args: string[]): void {
  execFileSync(PY, ["-m", "openworld.cli", ...args], {
    cwd: REPO,
    stdio: "pipe",
  });
}

async function waitForServer(timeoutMs: number): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    try {
      const res = await fetch(`${BASE}/api/status`);
      if (res.ok) return;
    } catch {
      /* not up yet */
    }
    if (Date.now() > deadline) throw new Error("server did not come up");
    await new Promise((r) => setTimeout(r, 500));
  }
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "console-contract-"));
  cli("synth", "--classes", "car,person,traffic_sign", "--per-class", "120",
      "--seed", "31", "--out", join(workDir, "ds"));
  cli("ingest", "--data", join(workDir, "ds"),
      "--train-out", join(workDir, "train.owc"),
      "--test-out", join(workDir, "test.owc"),
      "--train-cities", "9", "--test-cities", "3", "--seed", "31");
  serveProc = spawn(
    PY,
    ["-m", "openworld.cli", "serve",
     "--train-store", join(workDir, "train.owc"),
     "--test-store", join(workDir, "test.owc"),
     "--known", "car,person", "--schedule", "traffic_sign",
     "--members", "2", "--arch", "A", "--epochs", "3",
     "--filters", "4,8", "--dense-width", "24",
     "--calibrate", "--percentile", "10", "--min-new", "20",
     "--oracle", "external", "--seed", "31",
     "--port", String(PORT), "--bind", "127.0.0.1"],
    { cwd: REPO, stdio: "pipe" },
  );
  await waitForServer(120_000);
}, 180_000);

afterAll(() => {
  serveProc?.kill("SIGTERM");
  if (workDir) rmSync(workDir, { recursive: true, force: true });
});

describe("console against a live serve", () => {
  const api = new ApiClient(BASE);
  const store = new ConsoleStore();
  const controller = new ConsoleController(api, store);
  const poller = new Poller(api, store);

  it("lists pending items within 2 s of flagging", async () => {
    poller.start();
    await new Promise((r) => setTimeout(r, 2000));
    poller.stop();
    expect(store.state.items.length).toBeGreaterThan(0);
    expect(store.state.status).not.toBeNull();
    expect(store.state.status!.queue_depth).toBe(store.state.items.length);
    const ids = store.state.items.map((i) => i.id);
    expect(ids).toEqual([...ids].sort((a, b) => a - b));
  }, 20_000);

  it("a submitted label transitions the item server-side", async () => {
    const target = store.state.items[0]!;
    const sent = await controller.submitLabel(target.id, "car");
    expect(sent).toBe(true);
    expect(store.state.items.some((i) => i.id === target.id)).toBe(false);
    const server = (await api.queue()).body;
    expect(server.some((i) => i.id === target.id)).toBe(false);
    // the server refuses a second resolution of the same item
    const again = await api.label(target.id, "person");
    expect(again.status).toBe(409);
  }, 20_000);

  it("double-submission yields exactly one server mutation", async () => {
    await poller.tick();
    const target = store.state.items[0]!;
    let requests = 0;
    const counting = new ApiClient(BASE, (input, init) => {
      requests += 1;
      return fetch(input, init);
    });
    const ctrl = new ConsoleController(counting, store);
    const results = await Promise.all([
      ctrl.submitLabel(target.id, "person"),
      ctrl.submitLabel(target.id, "person"),
    ]);
    expect(requests).toBe(1);
    expect(results.filter(Boolean)).toHaveLength(1);
    const again = await api.label(target.id, "person");
    expect(again.status).toBe(409); // exactly one mutation reached the server
  }, 20_000);

  it("the 20th new-class label surfaces the retrain banner", async () => {
    let labeled = 0;
    for (;;) {
      await poller.tick();
      const pending = store.state.items;
      expect(pending.length).toBeGreaterThan(0);
      const target = pending[0]!;
      await controller.submitLabel(target.id, "traffic_sign");
      labeled += 1;
      if (store.state.banner) break;
      expect(labeled).toBeLessThan(60);
    }
    expect(store.state.banner).toMatch(/traffic_sign/);
    const status = (await api.status()).body;
    expect(status.retraining || status.cycle > 0).toBe(true);
  }, 120_000);
});

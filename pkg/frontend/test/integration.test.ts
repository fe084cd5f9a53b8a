// End-to-end against the real interpreter: spawn a run that serves
// approvals over HTTP, steer it with the real console state machine.

import { ChildProcess, spawn } from "node:child_process";
import { fileURLToPath } from "node:url";
import { afterEach, describe, expect, it } from "vitest";

import { ApprovalClient } from "../src/client.js";
import { ApprovalConsole, ConsoleView } from "../src/console.js";
import { renderBannerHtml } from "../src/ui.js";

const REPO_ROOT = fileURLToPath(new URL("../..", import.meta.url));

interface LiveRun {
  proc: ChildProcess;
  stdout: () => string;
  stderr: () => string;
}

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

async function startRun(port: number): Promise<LiveRun> {
  let out = "";
  let err = "";
  const proc = spawn(
    "python3",
    [
      "-m", "termflow.cli", "run", "demos/fig3.py",
      "--env", "demos/fig3_env.json",
      "--approver", `serve:${port}`,
      "--linger",
    ],
    { cwd: REPO_ROOT, env: { ...process.env, PYTHONUNBUFFERED: "1" } },
  );
  proc.stdout?.on("data", (d) => (out += String(d)));
  proc.stderr?.on("data", (d) => (err += String(d)));
  const deadline = Date.now() + 15_000;
  while (!err.includes("approval server listening")) {
    if (proc.exitCode !== null) throw new Error(`run exited early: ${err}`);
    if (Date.now() > deadline) throw new Error(`server never came up: ${err}`);
    await sleep(50);
  }
  return { proc, stdout: () => out, stderr: () => err };
}

async function waitFor(
  c: ApprovalConsole,
  pred: (v: ConsoleView) => boolean,
  what: string,
): Promise<ConsoleView> {
  const deadline = Date.now() + 15_000;
  while (Date.now() < deadline) {
    const view = c.current();
    if (pred(view)) return view;
    await sleep(40);
  }
  throw new Error(`timed out waiting for ${what}: ${JSON.stringify(c.current())}`);
}

async function waitText(get: () => string, needle: string): Promise<void> {
  const deadline = Date.now() + 10_000;
  while (!get().includes(needle)) {
    if (Date.now() > deadline) throw new Error(`never saw ${JSON.stringify(needle)} in: ${get()}`);
    await sleep(40);
  }
}

describe("live console contract", () => {
  const cleanup: Array<() => void> = [];
  afterEach(() => {
    while (cleanup.length > 0) cleanup.pop()?.();
  });

  function steer(port: number): ApprovalConsole {
    const c = new ApprovalConsole(new ApprovalClient(`http://127.0.0.1:${port}`), {
      intervalMs: 100,
    });
    c.start();
    cleanup.push(() => c.stop());
    return c;
  }

  it("approve, approve: two batches then Result: True", async () => {
    const run = await startRun(18931);
    cleanup.push(() => run.proc.kill());
    const c = steer(18931);

    let view = await waitFor(
      c,
      (v) => v.status === "awaiting-approval" && v.batch?.batch_id === 1,
      "batch 1",
    );
    expect(view.batch?.calls.map((x) => x.fn)).toEqual([".find"]);

    await c.approve();
    view = await waitFor(
      c,
      (v) => v.status === "awaiting-approval" && v.batch?.batch_id === 2,
      "batch 2",
    );
    expect(view.batch?.calls.map((x) => x.fn)).toEqual([".simple_query", ".simple_query"]);

    await c.approve();
    view = await waitFor(c, (v) => v.status === "finished", "finished");
    expect(view.result).toBe("True");
    expect(renderBannerHtml(view)).toContain("Result: True");

    await waitText(run.stdout, "Result: true");
    await waitText(run.stdout, "approval rounds: 2");
  });

  it("approve, reject: the run ends rejected at batch 2", async () => {
    const run = await startRun(18932);
    cleanup.push(() => run.proc.kill());
    const c = steer(18932);

    await waitFor(c, (v) => v.batch?.batch_id === 1, "batch 1");
    await c.approve();
    await waitFor(c, (v) => v.batch?.batch_id === 2, "batch 2");
    await c.reject();

    const view = await waitFor(c, (v) => v.status === "rejected", "rejected");
    expect(view.detail).toBe("batch 2");
    expect(renderBannerHtml(view)).toContain("Rejected: batch 2");
    await waitText(run.stdout, "Rejected: batch 2");
  });

  it("a rejected run without linger exits with the rejection code", async () => {
    let out = "";
    const proc = spawn(
      "python3",
      [
        "-m", "termflow.cli", "run", "demos/fig3.py",
        "--env", "demos/fig3_env.json",
        "--approver", "serve:18933",
      ],
      { cwd: REPO_ROOT, env: { ...process.env, PYTHONUNBUFFERED: "1" } },
    );
    cleanup.push(() => proc.kill());
    proc.stdout?.on("data", (d) => (out += String(d)));
    const exited = new Promise<number | null>((resolve) => proc.on("exit", resolve));

    const client = new ApprovalClient("http://127.0.0.1:18933");
    const deadline = Date.now() + 15_000;
    let batch = null;
    while (batch === null && Date.now() < deadline) {
      batch = await client.getPending().catch(() => null);
      if (batch === null) await sleep(50);
    }
    expect(batch?.batch_id).toBe(1);
    expect(await client.postDecision(1, false)).toBe("accepted");

    expect(await exited).toBe(4);
    expect(out).toContain("Rejected: batch 1");
  });
});

import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // the integration test spawns the real interpreter and waits on HTTP
    testTimeout: 30_000,
    hookTimeout: 30_000,
  },
});

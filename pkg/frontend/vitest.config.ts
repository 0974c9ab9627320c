import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    globals: true,
    include: ["tests/**/*.test.ts"],
    // the integration test boots the Python service and runs a real job
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});

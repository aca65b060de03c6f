import { defineConfig } from 'vitest/config'

export default defineConfig({
  test: {
    include: ['tests/**/*.test.ts'],
    environment: 'node',
    testTimeout: 20000,
    hookTimeout: 180000, // the e2e fixture builds a real run directory once
    fileParallelism: false, // e2e owns a server process and fixed ports
  },
})

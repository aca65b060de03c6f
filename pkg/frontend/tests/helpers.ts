/**
 * Test harness: a real review service process and a scripted jsdom browser.
 *
 * The fixture server is the actual Python CLI serving an actual run
 * directory; nothing is mocked. Each "tab" is an independent jsdom window
 * running the app against that server over real HTTP.
 */

import { spawn, type ChildProcess } from 'node:child_process'
import { createServer } from 'node:net'
import { dirname, join } from 'node:path'
import { fileURLToPath } from 'node:url'

import { JSDOM } from 'jsdom'

import { mountApp, type App, type AppConfig } from '../src/main.js'

const HERE = dirname(fileURLToPath(import.meta.url))
const FIXTURE_SCRIPT = join(HERE, 'serve_fixture.py')

export function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const server = createServer()
    server.on('error', reject)
    server.listen(0, '127.0.0.1', () => {
      const address = server.address()
      if (address === null || typeof address === 'string') {
        reject(new Error('no port assigned'))
        return
      }
      server.close(() => resolve(address.port))
    })
  })
}

export async function until(
  cond: () => boolean,
  timeoutMs = 10000,
  stepMs = 20,
): Promise<void> {
  const deadline = Date.now() + timeoutMs
  while (Date.now() < deadline) {
    if (cond()) return
    await new Promise((r) => setTimeout(r, stepMs))
  }
  throw new Error(`condition not met within ${timeoutMs}ms`)
}

export interface FixtureServer {
  port: number
  baseUrl: string
  runDir: string
  proc: ChildProcess
  restarted: boolean
  log: string[]
}

export async function startFixture(runDir: string, port?: number): Promise<FixtureServer> {
  const chosen = port ?? (await freePort())
  const proc = spawn(
    'python3',
    [FIXTURE_SCRIPT, '--run-dir', runDir, '--port', String(chosen)],
    { stdio: ['ignore', 'pipe', 'pipe'] },
  )
  const log: string[] = []
  let restarted = false
  let ready = false
  let failed: string | null = null
  proc.stdout!.on('data', (chunk: Buffer) => {
    for (const line of chunk.toString().split('\n')) {
      if (!line.trim()) continue
      log.push(line)
      if (line.startsWith('READY')) {
        ready = true
        restarted = line.includes('restarted=True')
      }
      if (line.startsWith('FIXTURE-ERROR')) failed = line
    }
  })
  proc.stderr!.on('data', (chunk: Buffer) => log.push(chunk.toString()))
  proc.on('exit', (code) => {
    if (!ready) failed = failed ?? `fixture exited early with code ${code}`
  })

  await until(() => ready || failed !== null, 150000, 100)
  if (failed) throw new Error(`${failed}\n${log.join('\n')}`)

  // READY precedes uvicorn binding the socket; poll until it answers
  const baseUrl = `http://127.0.0.1:${chosen}`
  const deadline = Date.now() + 15000
  for (;;) {
    try {
      const response = await fetch(`${baseUrl}/clusters/0/related`)
      if (response.ok) break
    } catch {
      // not listening yet
    }
    if (Date.now() > deadline) throw new Error(`server never answered on ${baseUrl}`)
    await new Promise((r) => setTimeout(r, 100))
  }
  return { port: chosen, baseUrl, runDir, proc, restarted, log }
}

export function stopFixture(fixture: FixtureServer): Promise<void> {
  return new Promise((resolve) => {
    if (fixture.proc.exitCode !== null) {
      resolve()
      return
    }
    const killTimer = setTimeout(() => fixture.proc.kill('SIGKILL'), 5000)
    fixture.proc.on('exit', () => {
      clearTimeout(killTimer)
      resolve()
    })
    fixture.proc.kill('SIGTERM')
  })
}

// ---- scripted browser tabs ----

export interface Tab {
  dom: JSDOM
  root: HTMLElement
  app: App
  window: Window & typeof globalThis
}

/** Open a fresh browser window on the app at the given hash route. */
export function openTab(baseUrl: string, hash: string, config?: Partial<AppConfig>): Tab {
  const dom = new JSDOM('<!doctype html><html><body><div id="app"></div></body></html>', {
    url: `http://localhost/${hash}`,
  })
  const root = dom.window.document.getElementById('app') as HTMLElement
  const app = mountApp(root, { baseUrl, curator: false, pollMs: 0, ...config })
  return { dom, root, app, window: dom.window as unknown as Window & typeof globalThis }
}

export function closeTab(tab: Tab): void {
  tab.app.destroy()
  tab.dom.window.close()
}

export function query<T extends Element>(tab: Tab, selector: string): T {
  const node = tab.root.querySelector(selector)
  if (!node) throw new Error(`no element matches ${selector}`)
  return node as T
}

export async function clickWhen(tab: Tab, selector: string, timeoutMs = 10000): Promise<void> {
  await until(() => {
    const node = tab.root.querySelector<HTMLButtonElement>(selector)
    return node !== null && !node.disabled
  }, timeoutMs)
  query<HTMLButtonElement>(tab, selector).click()
}

export function setInput(tab: Tab, selector: string, value: string): void {
  const input = query<HTMLInputElement>(tab, selector)
  input.value = value
  input.dispatchEvent(new tab.dom.window.Event('input'))
}

export function setCheckbox(tab: Tab, selector: string, checked: boolean): void {
  const box = query<HTMLInputElement>(tab, selector)
  box.checked = checked
  box.dispatchEvent(new tab.dom.window.Event('change'))
}

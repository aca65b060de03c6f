/**
 * Single-page app over the review service API.
 *
 * Routes live in the URL hash, so a reload lands on the same view and
 * re-fetches everything from the server:
 *
 *   #/session/<session_id>     one team's review session
 *   #/dashboard/<round_id>     the consensus dashboard
 *   (empty)                    create or resume a session
 *
 * The app holds no authoritative state of its own; the server is the
 * source of truth after any reload or restart.
 */

import { ReviewApi } from './api.js'
import { renderDashboard } from './dashboard.js'
import { renderClusterPanel, renderQueue } from './gallery.js'
import { SessionStore } from './store.js'
import type { FetchLike } from './api.js'

export interface AppConfig {
  baseUrl: string
  curator: boolean
  /** dashboard auto-refresh period; 0 disables the poll */
  pollMs?: number
  fetchFn?: FetchLike
}

export interface App {
  store: SessionStore
  render(): void
  destroy(): void
}

function el<K extends keyof HTMLElementTagNameMap>(
  parent: Element,
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = parent.ownerDocument.createElement(tag)
  if (className) node.className = className
  if (text !== undefined) node.textContent = text
  parent.append(node)
  return node
}

type Route =
  | { kind: 'home' }
  | { kind: 'session'; sessionId: string }
  | { kind: 'dashboard'; roundId: string }

export function parseRoute(hash: string): Route {
  const parts = hash.replace(/^#\/?/, '').split('/')
  if (parts[0] === 'session' && parts[1]) {
    return { kind: 'session', sessionId: decodeURIComponent(parts[1]) }
  }
  if (parts[0] === 'dashboard' && parts[1]) {
    return { kind: 'dashboard', roundId: decodeURIComponent(parts[1]) }
  }
  return { kind: 'home' }
}

export function mountApp(root: HTMLElement, config: AppConfig): App {
  const doc = root.ownerDocument
  const win = doc.defaultView!
  const api = new ReviewApi(config.baseUrl, config.fetchFn)
  const store = new SessionStore(api)
  let selectedCluster: number | null = null
  let loadedSessionId: string | null = null
  let pollTimer: ReturnType<typeof setInterval> | null = null

  function stopPoll(): void {
    if (pollTimer !== null) {
      clearInterval(pollTimer)
      pollTimer = null
    }
  }

  function renderHome(): void {
    stopPoll()
    root.textContent = ''
    el(root, 'h1', 'app-title', 'cluster review')

    const createForm = el(root, 'form', 'create-session-form')
    createForm.addEventListener('submit', (e) => e.preventDefault())
    el(createForm, 'p', 'form-legend', 'start a team session')
    const team = el(createForm, 'input', 'team-input') as HTMLInputElement
    team.placeholder = 'team id'
    const round = el(createForm, 'input', 'round-input') as HTMLInputElement
    round.placeholder = 'round id'
    const seed = el(createForm, 'input', 'seed-input') as HTMLInputElement
    seed.placeholder = 'seed'
    seed.value = '0'
    const start = el(createForm, 'button', 'create-session', 'start session')
    start.dataset.action = 'create-session'
    start.addEventListener('click', () => {
      void store.create(team.value.trim(), round.value.trim(), Number(seed.value)).then((ok) => {
        if (ok && store.session) {
          loadedSessionId = store.session.session_id
          win.location.hash = `#/session/${encodeURIComponent(store.session.session_id)}`
        } else {
          render()
        }
      })
    })

    const joinForm = el(root, 'form', 'join-session-form')
    joinForm.addEventListener('submit', (e) => e.preventDefault())
    el(joinForm, 'p', 'form-legend', 'resume a session or open a dashboard')
    const sid = el(joinForm, 'input', 'session-id-input') as HTMLInputElement
    sid.placeholder = 'session id'
    const join = el(joinForm, 'button', 'join-session', 'resume')
    join.dataset.action = 'join-session'
    join.addEventListener('click', () => {
      if (sid.value.trim()) {
        win.location.hash = `#/session/${encodeURIComponent(sid.value.trim())}`
      }
    })
    const rid = el(joinForm, 'input', 'round-id-input') as HTMLInputElement
    rid.placeholder = 'round id'
    const dash = el(joinForm, 'button', 'open-dashboard', 'dashboard')
    dash.dataset.action = 'open-dashboard'
    dash.addEventListener('click', () => {
      if (rid.value.trim()) {
        win.location.hash = `#/dashboard/${encodeURIComponent(rid.value.trim())}`
      }
    })

    if (store.lastError) {
      const bar = el(root, 'div', 'error-bar', store.lastError)
      bar.dataset.role = 'error'
    }
  }

  function renderSession(sessionId: string): void {
    stopPoll()
    if (loadedSessionId !== sessionId || !store.session) {
      loadedSessionId = sessionId
      root.textContent = ''
      el(root, 'p', 'loading', 'loading session')
      void store.load(sessionId).then(() => render())
      return
    }
    root.textContent = ''
    const session = store.session
    const header = el(root, 'div', 'session-header')
    el(header, 'h1', 'app-title', `team ${session.team_id}, round ${session.round_id}`)
    el(header, 'span', 'session-id', session.session_id)
    const dashLink = el(header, 'a', 'dashboard-link', 'consensus dashboard')
    dashLink.href = `#/dashboard/${encodeURIComponent(session.round_id)}`

    if (store.lastError && !store.session) {
      const bar = el(root, 'div', 'error-bar', store.lastError)
      bar.dataset.role = 'error'
      return
    }

    const layout = el(root, 'div', 'session-layout')
    const queueBox = el(layout, 'nav', 'queue-box')
    const panelBox = el(layout, 'main', 'panel-box')

    if (selectedCluster === null) selectedCluster = session.next_cluster
    renderQueue(queueBox, store, selectedCluster, (cluster) => {
      selectedCluster = cluster
      render()
    })
    if (selectedCluster !== null) {
      renderClusterPanel(panelBox, store, selectedCluster)
    } else {
      el(panelBox, 'p', 'all-done', 'all clusters finalized')
    }
  }

  function renderDash(roundId: string): void {
    stopPoll()
    root.textContent = ''
    const header = el(root, 'div', 'dashboard-header')
    const refresh = el(header, 'button', 'dashboard-refresh', 'refresh')
    refresh.dataset.action = 'refresh-dashboard'
    refresh.addEventListener('click', () => render())
    const body = el(root, 'div', 'dashboard-body')
    void renderDashboard(body, api, roundId, {
      curator: config.curator,
      onChanged: () => render(),
    })
    const pollMs = config.pollMs ?? 0
    if (pollMs > 0) {
      pollTimer = setInterval(() => {
        void renderDashboard(body, api, roundId, {
          curator: config.curator,
          onChanged: () => render(),
        })
      }, pollMs)
    }
  }

  function render(): void {
    const route = parseRoute(win.location.hash)
    if (route.kind === 'session') renderSession(route.sessionId)
    else if (route.kind === 'dashboard') renderDash(route.roundId)
    else renderHome()
  }

  const onHashChange = (): void => {
    selectedCluster = null
    render()
  }
  win.addEventListener('hashchange', onHashChange)
  const unsubscribe = store.subscribe(() => {
    // re-render on settled mutations; skip transient busy flips mid-call
    if (!store.busy) render()
  })

  render()
  return {
    store,
    render,
    destroy(): void {
      stopPoll()
      win.removeEventListener('hashchange', onHashChange)
      unsubscribe()
      root.textContent = ''
    },
  }
}

/**
 * Session state container.
 *
 * The stored session is always a payload the server returned; no action
 * ever mutates a stage locally. While a mutation is in flight the store
 * exposes an optimistic stage overlay for rendering, and on rejection the
 * overlay is dropped (rollback) and the error surfaced together with a
 * retry thunk. After any successful mutation the session is re-fetched,
 * so the view converges on the server's state, never the client's guess.
 */

import { ApiError, ReviewApi } from './api.js'
import type { DescriptionPayload, SessionPayload, Stage } from './types.js'

export type Listener = () => void

interface OptimisticOverlay {
  cluster: number
  stage: Stage
}

export class SessionStore {
  session: SessionPayload | null = null
  lastError: string | null = null
  errorIsNetwork = false
  retry: (() => Promise<void>) | null = null
  busy = false

  private overlay: OptimisticOverlay | null = null
  private listeners: Listener[] = []

  constructor(readonly api: ReviewApi) {}

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn)
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn)
    }
  }

  private notify(): void {
    for (const fn of this.listeners) fn()
  }

  /** Server stage, with the in-flight optimistic overlay applied on top. */
  stageOf(cluster: number): Stage | null {
    if (this.overlay && this.overlay.cluster === cluster) return this.overlay.stage
    const payload = this.session?.clusters[String(cluster)]
    return payload ? payload.stage : null
  }

  async load(sessionId: string): Promise<boolean> {
    try {
      this.session = await this.api.getSession(sessionId)
      this.lastError = null
      this.errorIsNetwork = false
      this.retry = null
      this.notify()
      return true
    } catch (err) {
      this.fail(err, () => this.load(sessionId).then(() => undefined))
      return false
    }
  }

  async create(teamId: string, roundId: string, seed: number): Promise<boolean> {
    try {
      this.session = await this.api.createSession(teamId, roundId, seed)
      this.lastError = null
      this.errorIsNetwork = false
      this.retry = null
      this.notify()
      return true
    } catch (err) {
      this.fail(err, () => this.create(teamId, roundId, seed).then(() => undefined))
      return false
    }
  }

  revealInitial(cluster: number): Promise<boolean> {
    return this.act(cluster, 'describing', (id) => this.api.revealInitial(id, cluster))
  }

  submitDescriptions(cluster: number, descriptions: DescriptionPayload): Promise<boolean> {
    return this.act(cluster, 'validation_reveal', (id) =>
      this.api.submitDescriptions(id, cluster, descriptions),
    )
  }

  revealValidation(cluster: number): Promise<boolean> {
    return this.act(cluster, 'finalize_pending', (id) => this.api.revealValidation(id, cluster))
  }

  finalize(
    cluster: number,
    decision: 'confirm' | 'revise' | 'heterogeneous',
    revision?: DescriptionPayload,
  ): Promise<boolean> {
    return this.act(cluster, 'finalized', (id) =>
      this.api.finalize(id, cluster, decision, revision),
    )
  }

  /**
   * Run one mutation with an optimistic stage overlay. The overlay only
   * affects rendering; the stored payload changes exclusively via the
   * re-fetch that follows a server-confirmed success.
   */
  private async act(
    cluster: number,
    optimistic: Stage,
    call: (sessionId: string) => Promise<unknown>,
  ): Promise<boolean> {
    if (!this.session) throw new Error('no session loaded')
    const sessionId = this.session.session_id
    this.overlay = { cluster, stage: optimistic }
    this.busy = true
    this.notify()
    try {
      await call(sessionId)
      this.session = await this.api.getSession(sessionId)
      this.lastError = null
      this.errorIsNetwork = false
      this.retry = null
      return true
    } catch (err) {
      // rollback: the overlay is discarded, stored state was never touched
      this.fail(err, () => this.act(cluster, optimistic, call).then(() => undefined))
      return false
    } finally {
      this.overlay = null
      this.busy = false
      this.notify()
    }
  }

  private fail(err: unknown, retry: () => Promise<void>): void {
    if (err instanceof ApiError) {
      this.lastError = err.message
      this.errorIsNetwork = err.isNetwork
      this.retry = err.isNetwork ? retry : null
    } else {
      this.lastError = err instanceof Error ? err.message : String(err)
      this.errorIsNetwork = false
      this.retry = null
    }
    this.notify()
  }
}

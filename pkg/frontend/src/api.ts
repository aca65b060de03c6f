/**
 * HTTP client for the review service.
 *
 * One method per endpoint, JSON in and out. Failures become ApiError:
 * status 0 means the request never reached the server (network failure),
 * anything else carries the server's status code and detail message, so
 * callers can distinguish protocol rejections (409/422) from missing
 * resources (404) and retry-worthy transport errors.
 */

import type {
  ConsensusPayload,
  DescriptionPayload,
  RelatedPayload,
  RevealResponse,
  SessionPayload,
  Stage,
} from './types.js'

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(status === 0 ? `network failure: ${detail}` : `${status}: ${detail}`)
    this.name = 'ApiError'
  }

  get isNetwork(): boolean {
    return this.status === 0
  }
}

export class ReviewApi {
  constructor(
    readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (url, init) => globalThis.fetch(url, init),
  ) {}

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
    headers?: Record<string, string>,
  ): Promise<T> {
    let response: Response
    try {
      response = await this.fetchFn(this.baseUrl + path, {
        method,
        headers: { 'content-type': 'application/json', ...headers },
        body: body === undefined ? undefined : JSON.stringify(body),
      })
    } catch (err) {
      throw new ApiError(0, err instanceof Error ? err.message : String(err))
    }
    if (!response.ok) {
      let detail = response.statusText
      try {
        const parsed = (await response.json()) as { detail?: unknown }
        if (parsed && parsed.detail !== undefined) detail = JSON.stringify(parsed.detail)
      } catch {
        // non-JSON error body: keep the status text
      }
      throw new ApiError(response.status, detail)
    }
    return (await response.json()) as T
  }

  createSession(teamId: string, roundId: string, seed: number): Promise<SessionPayload> {
    return this.request('POST', '/sessions', { team_id: teamId, round_id: roundId, seed })
  }

  getSession(sessionId: string): Promise<SessionPayload> {
    return this.request('GET', `/sessions/${encodeURIComponent(sessionId)}`)
  }

  nextCluster(sessionId: string): Promise<{ cluster: number | null }> {
    return this.request('GET', `/sessions/${encodeURIComponent(sessionId)}/next`)
  }

  revealInitial(sessionId: string, cluster: number): Promise<RevealResponse> {
    return this.request(
      'POST',
      `/sessions/${encodeURIComponent(sessionId)}/clusters/${cluster}/reveal-initial`,
    )
  }

  submitDescriptions(
    sessionId: string,
    cluster: number,
    descriptions: DescriptionPayload,
  ): Promise<{ stage: Stage }> {
    return this.request(
      'POST',
      `/sessions/${encodeURIComponent(sessionId)}/clusters/${cluster}/descriptions`,
      descriptions,
    )
  }

  revealValidation(sessionId: string, cluster: number): Promise<RevealResponse> {
    return this.request(
      'POST',
      `/sessions/${encodeURIComponent(sessionId)}/clusters/${cluster}/reveal-validation`,
    )
  }

  finalize(
    sessionId: string,
    cluster: number,
    decision: 'confirm' | 'revise' | 'heterogeneous',
    revision?: DescriptionPayload,
  ): Promise<{ final: DescriptionPayload; stage: Stage }> {
    const body = {
      decision,
      terms: revision ? revision.terms : [],
      heterogeneous: revision ? revision.heterogeneous : false,
    }
    return this.request(
      'POST',
      `/sessions/${encodeURIComponent(sessionId)}/clusters/${cluster}/finalize`,
      body,
    )
  }

  consensus(roundId: string): Promise<ConsensusPayload> {
    return this.request('GET', `/rounds/${encodeURIComponent(roundId)}/consensus`)
  }

  adjudicate(
    roundId: string,
    cluster: number,
    consensus: 'agree' | 'disagree' | 'heterogeneous',
    note: string,
  ): Promise<{ cluster: number; consensus: string }> {
    return this.request(
      'POST',
      `/rounds/${encodeURIComponent(roundId)}/clusters/${cluster}/adjudicate`,
      { consensus, note },
      { 'x-role': 'curator' },
    )
  }

  related(cluster: number): Promise<RelatedPayload> {
    return this.request('GET', `/clusters/${cluster}/related`)
  }
}

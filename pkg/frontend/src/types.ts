/**
 * Wire types for the cluster review service.
 *
 * These mirror the JSON payloads the HTTP API returns, field for field.
 * The UI never invents state of its own: everything rendered comes from
 * one of these objects, freshly fetched from the server.
 */

export type Stage =
  | 'initial_reveal'
  | 'describing'
  | 'validation_reveal'
  | 'finalize_pending'
  | 'finalized'

export const STAGE_ORDER: Stage[] = [
  'initial_reveal',
  'describing',
  'validation_reveal',
  'finalize_pending',
  'finalized',
]

export const STAGE_LABELS: Record<Stage, string> = {
  initial_reveal: 'awaiting reveal',
  describing: 'describing',
  validation_reveal: 'awaiting validation set',
  finalize_pending: 'finalize',
  finalized: 'finalized',
}

export interface RevealItemPayload {
  image_id: string
  patient_id: string
  cluster: number
  image_url: string
  attribution_url: string
  overlay_url: string
}

export interface DescriptionPayload {
  terms: string[] // ranked: index 0 = most prevalent
  heterogeneous: boolean
}

export interface ClusterPayload {
  stage: Stage
  degraded: boolean
  initial: RevealItemPayload[]
  validation: RevealItemPayload[]
  submissions: DescriptionPayload[]
  final: DescriptionPayload | null
  final_decision: 'confirm' | 'revise' | 'heterogeneous' | null
}

export interface SessionPayload {
  session_id: string
  team_id: string
  round_id: string
  seed: number
  next_cluster: number | null
  clusters: Record<string, ClusterPayload>
}

export interface RevealResponse {
  items: RevealItemPayload[]
  degraded?: boolean
  stage: Stage
}

export interface ConsensusRecordPayload {
  cluster: number
  team_a: string
  team_b: string
  description_a: DescriptionPayload
  description_b: DescriptionPayload
  consensus: 'agree' | 'disagree' | 'heterogeneous'
  pending_adjudication: boolean
  curator_note: string
}

export interface ConsensusPayload {
  round_id: string
  records: ConsensusRecordPayload[]
}

export interface RelatedPayload {
  cluster: number
  related: number[]
}

export function clusterIndices(session: SessionPayload): number[] {
  return Object.keys(session.clusters)
    .map(Number)
    .sort((a, b) => a - b)
}

/**
 * Consensus dashboard: one row per cluster with both teams' descriptions
 * and the consensus verdict, partitioned into agreed / heterogeneous /
 * disagreed / pending-adjudication groups. Curators get adjudication
 * controls on pending rows; everyone else sees a read-only table.
 */

import { ApiError, ReviewApi } from './api.js'
import type { ConsensusRecordPayload, DescriptionPayload } from './types.js'

export interface DashboardModel {
  agree: ConsensusRecordPayload[]
  heterogeneous: ConsensusRecordPayload[]
  disagree: ConsensusRecordPayload[]
  pending: ConsensusRecordPayload[]
}

/** Pure partition of consensus records; pending wins over the verdict. */
export function partitionRecords(records: ConsensusRecordPayload[]): DashboardModel {
  const model: DashboardModel = { agree: [], heterogeneous: [], disagree: [], pending: [] }
  for (const record of records) {
    if (record.pending_adjudication) model.pending.push(record)
    else model[record.consensus].push(record)
  }
  return model
}

function describe(d: DescriptionPayload): string {
  return d.heterogeneous ? 'heterogeneous' : d.terms.join(' > ')
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

function renderGroup(
  root: HTMLElement,
  title: string,
  group: string,
  records: ConsensusRecordPayload[],
  controls?: (row: HTMLElement, record: ConsensusRecordPayload) => void,
): void {
  const section = el(root, 'section', `consensus-group group-${group}`)
  section.dataset.group = group
  el(section, 'h3', 'group-title', `${title} (${records.length})`)
  for (const record of records) {
    const row = el(section, 'div', 'consensus-row')
    row.dataset.cluster = String(record.cluster)
    el(row, 'span', 'row-cluster', `cluster ${record.cluster}`)
    el(row, 'span', 'row-team-a', `${record.team_a}: ${describe(record.description_a)}`)
    el(row, 'span', 'row-team-b', `${record.team_b}: ${describe(record.description_b)}`)
    el(row, 'span', 'row-verdict', record.consensus)
    if (record.curator_note) el(row, 'span', 'row-note', `note: ${record.curator_note}`)
    if (controls) controls(row, record)
  }
}

export interface DashboardOptions {
  curator: boolean
  onChanged?: () => void
}

export async function renderDashboard(
  root: HTMLElement,
  api: ReviewApi,
  roundId: string,
  options: DashboardOptions,
): Promise<void> {
  root.textContent = ''
  el(root, 'h2', 'dashboard-title', `round ${roundId} consensus`)
  let records: ConsensusRecordPayload[]
  try {
    records = (await api.consensus(roundId)).records
  } catch (err) {
    const message =
      err instanceof ApiError && err.status === 422
        ? `consensus not ready: ${err.detail}`
        : err instanceof Error
          ? err.message
          : String(err)
    const note = el(root, 'p', 'dashboard-unready', message)
    note.dataset.role = 'error'
    return
  }
  const model = partitionRecords(records)
  renderGroup(root, 'agreed', 'agree', model.agree)
  renderGroup(root, 'heterogeneous', 'heterogeneous', model.heterogeneous)
  renderGroup(root, 'disagreed (adjudicated)', 'disagree', model.disagree)
  renderGroup(
    root,
    'pending adjudication',
    'pending',
    model.pending,
    options.curator
      ? (row, record) => {
          const doc = row.ownerDocument
          const select = doc.createElement('select')
          select.className = 'adjudicate-consensus'
          for (const value of ['agree', 'disagree', 'heterogeneous']) {
            const option = doc.createElement('option')
            option.value = value
            option.textContent = value
            select.append(option)
          }
          const note = doc.createElement('input')
          note.type = 'text'
          note.className = 'adjudicate-note'
          note.placeholder = 'curator note'
          const post = el(row, 'button', 'adjudicate-post', 'adjudicate')
          post.dataset.action = 'adjudicate'
          post.addEventListener('click', () => {
            void api
              .adjudicate(
                roundId,
                record.cluster,
                select.value as 'agree' | 'disagree' | 'heterogeneous',
                note.value,
              )
              .then(() => options.onChanged?.())
              .catch((err: unknown) => {
                el(row, 'span', 'adjudicate-error', err instanceof Error ? err.message : String(err))
              })
          })
          row.append(select, note)
          row.append(post)
        }
      : undefined,
  )
}

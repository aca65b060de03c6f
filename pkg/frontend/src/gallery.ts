/**
 * Cluster review views: the queue with stage indicators and the staged
 * gallery panel (reveal, describe, validate, finalize).
 *
 * Rendering is a pure function of the store: each pass rebuilds the panel
 * from the last server payload. The attribution-overlay toggle only swaps
 * the img src between the image URL and the overlay URL; it touches no
 * stored data and makes no API call.
 */

import { ReviewApi } from './api.js'
import { SessionStore } from './store.js'
import type { ClusterPayload, DescriptionPayload, RevealItemPayload } from './types.js'
import { clusterIndices, STAGE_LABELS } from './types.js'
import { canSubmit, draftToPayload, emptyDraft, MAX_TERMS, rankedTerms } from './validation.js'

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

function describePayload(d: DescriptionPayload): string {
  return d.heterogeneous ? 'heterogeneous' : d.terms.join(' > ')
}

// ---- cluster queue ----

export function renderQueue(
  root: HTMLElement,
  store: SessionStore,
  selected: number | null,
  onSelect: (cluster: number) => void,
): void {
  root.textContent = ''
  const session = store.session
  if (!session) return
  const list = el(root, 'ul', 'cluster-queue')
  for (const cluster of clusterIndices(session)) {
    const stage = store.stageOf(cluster)
    const item = el(list, 'li', 'queue-item')
    item.dataset.cluster = String(cluster)
    if (cluster === selected) item.classList.add('selected')
    const button = el(item, 'button', 'queue-button', `cluster ${cluster}`)
    button.dataset.action = 'select-cluster'
    button.addEventListener('click', () => onSelect(cluster))
    const badge = el(item, 'span', `stage-badge stage-${stage}`, stage ? STAGE_LABELS[stage] : '')
    badge.dataset.stage = stage ?? ''
    if (session.next_cluster === cluster) el(item, 'span', 'next-marker', 'next')
  }
}

// ---- image tiles ----

function renderTiles(
  root: HTMLElement,
  api: ReviewApi,
  items: RevealItemPayload[],
  kind: 'initial' | 'validation',
): void {
  const grid = el(root, 'div', `tile-grid ${kind}-tiles`)
  grid.dataset.kind = kind
  for (const item of items) {
    const tile = el(grid, 'figure', 'tile')
    tile.dataset.imageId = item.image_id
    const img = el(tile, 'img', 'tile-image')
    img.src = api.baseUrl + item.image_url
    img.dataset.plain = api.baseUrl + item.image_url
    img.dataset.overlay = api.baseUrl + item.overlay_url
    img.dataset.showing = 'plain'
    el(tile, 'figcaption', 'tile-caption', `${item.image_id} (${item.patient_id})`)
    const toggle = el(tile, 'button', 'overlay-toggle', 'overlay')
    toggle.dataset.action = 'toggle-overlay'
    toggle.addEventListener('click', () => {
      // presentation only: swap the src, never call the API
      const showOverlay = img.dataset.showing === 'plain'
      img.src = showOverlay ? img.dataset.overlay! : img.dataset.plain!
      img.dataset.showing = showOverlay ? 'overlay' : 'plain'
      toggle.classList.toggle('active', showOverlay)
    })
  }
}

// ---- description form ----

function renderDescriptionForm(
  root: HTMLElement,
  legend: string,
  submitLabel: string,
  onSubmit: (payload: DescriptionPayload) => void,
): void {
  const doc = root.ownerDocument
  const draft = emptyDraft()
  const form = el(root, 'form', 'description-form')
  form.addEventListener('submit', (e) => e.preventDefault())
  el(form, 'p', 'form-legend', legend)

  const inputs: HTMLInputElement[] = []
  for (let rank = 0; rank < MAX_TERMS; rank += 1) {
    const row = el(form, 'label', 'term-row', `term ${rank + 1}`)
    const input = doc.createElement('input')
    input.type = 'text'
    input.className = 'term-input'
    input.dataset.rank = String(rank)
    input.addEventListener('input', () => {
      draft.terms[rank] = input.value
      refresh()
    })
    row.append(input)
    inputs.push(input)
  }

  const hetRow = el(form, 'label', 'het-row', 'heterogeneous cluster')
  const hetBox = doc.createElement('input')
  hetBox.type = 'checkbox'
  hetBox.className = 'het-checkbox'
  hetBox.addEventListener('change', () => {
    draft.heterogeneous = hetBox.checked
    refresh()
  })
  hetRow.prepend(hetBox)

  const submit = el(form, 'button', 'submit-descriptions', submitLabel)
  submit.dataset.action = 'submit-descriptions'
  submit.addEventListener('click', () => {
    if (canSubmit(draft)) onSubmit(draftToPayload(draft))
  })
  const hint = el(form, 'p', 'form-hint', '')

  function refresh(): void {
    // a heterogeneous verdict and feature terms are mutually exclusive
    for (const input of inputs) input.disabled = draft.heterogeneous
    submit.disabled = !canSubmit(draft)
    hint.textContent = draft.heterogeneous
      ? 'terms disabled: cluster flagged heterogeneous'
      : `${rankedTerms(draft).length}/${MAX_TERMS} terms`
  }
  refresh()
}

// ---- the staged cluster panel ----

export function renderClusterPanel(
  root: HTMLElement,
  store: SessionStore,
  cluster: number,
): void {
  root.textContent = ''
  const session = store.session
  if (!session) return
  const payload: ClusterPayload | undefined = session.clusters[String(cluster)]
  if (!payload) {
    el(root, 'p', 'panel-error', `unknown cluster ${cluster}`)
    return
  }
  const api = store.api
  const stage = store.stageOf(cluster)!

  const header = el(root, 'div', 'panel-header')
  el(header, 'h2', 'panel-title', `cluster ${cluster}`)
  const stageTag = el(header, 'span', 'panel-stage', STAGE_LABELS[stage])
  stageTag.dataset.stage = stage
  if (payload.degraded) el(header, 'span', 'degraded-flag', 'degraded protocol')

  if (store.lastError) {
    const bar = el(root, 'div', 'error-bar', store.lastError)
    bar.dataset.role = 'error'
    if (store.retry) {
      const retry = el(bar, 'button', 'retry-button', 'retry')
      retry.dataset.action = 'retry'
      retry.addEventListener('click', () => void store.retry?.())
    }
  }

  if (payload.initial.length > 0) {
    el(root, 'h3', 'section-title', `initial reveal (${payload.initial.length} images)`)
    renderTiles(root, api, payload.initial, 'initial')
  }
  if (payload.validation.length > 0) {
    el(root, 'h3', 'section-title', `validation set (${payload.validation.length} images)`)
    renderTiles(root, api, payload.validation, 'validation')
  }

  switch (stage) {
    case 'initial_reveal': {
      const button = el(root, 'button', 'reveal-initial', 'reveal images')
      button.dataset.action = 'reveal-initial'
      button.disabled = store.busy
      button.addEventListener('click', () => void store.revealInitial(cluster))
      break
    }
    case 'describing': {
      renderDescriptionForm(
        root,
        'common features, most prevalent first',
        'submit descriptions',
        (payloadOut) => void store.submitDescriptions(cluster, payloadOut),
      )
      break
    }
    case 'validation_reveal': {
      const last = payload.submissions[payload.submissions.length - 1]
      if (last) el(root, 'p', 'submitted-terms', `submitted: ${describePayload(last)}`)
      const button = el(root, 'button', 'reveal-validation', 'reveal validation set')
      button.dataset.action = 'reveal-validation'
      button.disabled = store.busy
      button.addEventListener('click', () => void store.revealValidation(cluster))
      break
    }
    case 'finalize_pending': {
      const last = payload.submissions[payload.submissions.length - 1]
      if (last) el(root, 'p', 'submitted-terms', `submitted: ${describePayload(last)}`)
      const controls = el(root, 'div', 'finalize-controls')
      const confirm = el(controls, 'button', 'finalize-confirm', 'confirm')
      confirm.dataset.action = 'finalize-confirm'
      confirm.addEventListener('click', () => void store.finalize(cluster, 'confirm'))
      const het = el(controls, 'button', 'finalize-heterogeneous', 'heterogeneous')
      het.dataset.action = 'finalize-heterogeneous'
      het.addEventListener('click', () => void store.finalize(cluster, 'heterogeneous'))
      el(root, 'h3', 'section-title', 'or revise the description')
      renderDescriptionForm(root, 'replacement description', 'finalize with revision', (revision) =>
        void store.finalize(cluster, 'revise', revision),
      )
      break
    }
    case 'finalized': {
      const summary = el(root, 'div', 'final-summary')
      summary.dataset.decision = payload.final_decision ?? ''
      el(
        summary,
        'p',
        'final-line',
        `finalized (${payload.final_decision}): ${payload.final ? describePayload(payload.final) : ''}`,
      )
      el(summary, 'p', 'locked-note', 'this cluster is locked')
      break
    }
  }

  renderRelatedPanel(root, api, cluster)
}

/**
 * Read-only cross reference: clusters whose most likely grading label
 * matches this one. Collapsed by default; fetched on first expansion.
 */
function renderRelatedPanel(root: HTMLElement, api: ReviewApi, cluster: number): void {
  const details = el(root, 'details', 'related-panel')
  el(details, 'summary', 'related-summary', 'clusters with the same top grading label')
  const body = el(details, 'div', 'related-body', 'expand to load')
  let loaded = false
  details.addEventListener('toggle', () => {
    if (!details.open || loaded) return
    loaded = true
    api
      .related(cluster)
      .then((payload) => {
        body.textContent =
          payload.related.length > 0
            ? `related clusters: ${payload.related.join(', ')}`
            : 'no other cluster shares this label'
      })
      .catch(() => {
        loaded = false
        body.textContent = 'failed to load, expand again to retry'
      })
  })
}

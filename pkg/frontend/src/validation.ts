/**
 * Client-side description rules, matching the service exactly:
 * either 1 to 3 ranked non-blank terms, or the heterogeneous flag with
 * no terms at all. The form never offers a fourth input, so "more than
 * three terms" is unrepresentable client-side.
 */

import type { DescriptionPayload } from './types.js'

export const MAX_TERMS = 3

export interface DescriptionDraft {
  terms: string[] // fixed MAX_TERMS slots, blank = unused
  heterogeneous: boolean
}

export function emptyDraft(): DescriptionDraft {
  return { terms: Array(MAX_TERMS).fill(''), heterogeneous: false }
}

/** Non-blank terms in rank order, trimmed. */
export function rankedTerms(draft: DescriptionDraft): string[] {
  return draft.terms.map((t) => t.trim()).filter((t) => t.length > 0)
}

export function draftErrors(draft: DescriptionDraft): string[] {
  const errors: string[] = []
  if (draft.terms.length > MAX_TERMS) {
    errors.push(`at most ${MAX_TERMS} ranked terms allowed`)
  }
  const ranked = rankedTerms(draft)
  if (draft.heterogeneous) {
    if (ranked.length > 0) errors.push('a heterogeneous cluster carries no feature terms')
  } else if (ranked.length === 0) {
    errors.push('enter 1-3 ranked terms or flag the cluster heterogeneous')
  }
  return errors
}

export function canSubmit(draft: DescriptionDraft): boolean {
  return draftErrors(draft).length === 0
}

export function draftToPayload(draft: DescriptionDraft): DescriptionPayload {
  return draft.heterogeneous
    ? { terms: [], heterogeneous: true }
    : { terms: rankedTerms(draft), heterogeneous: false }
}

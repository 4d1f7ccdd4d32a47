import { QueryResponse, Schema } from "./types.js";

/** In-memory session: which image is selected, which single-attribute
 * manipulation is chosen, and the last grid we rendered. A page refresh
 * resets everything by design. */
export interface SessionState {
  queryId: string | null;
  queryLabels: number[] | null;
  attribute: string | null;
  value: string | null;
  k: number;
  lastResponse: QueryResponse | null;
  overlayAttribute: string | null;
}

export function initialState(k: number = 10): SessionState {
  if (k < 1) {
    throw new Error("k must be >= 1");
  }
  return {
    queryId: null,
    queryLabels: null,
    attribute: null,
    value: null,
    k,
    lastResponse: null,
    overlayAttribute: null,
  };
}

export function selectQueryImage(
  state: SessionState,
  id: string,
  labels: number[],
): SessionState {
  // a fresh image invalidates the pending manipulation and any grid
  return { ...state, queryId: id, queryLabels: labels, attribute: null, value: null, lastResponse: null, overlayAttribute: null };
}

/** The value currently carried by the query image for an attribute: it is
 * shown but never selectable as a manipulation target. */
export function currentValueName(
  schema: Schema,
  labels: number[],
  attribute: string,
): string {
  const idx = schema.attributes.findIndex((a) => a.name === attribute);
  if (idx < 0) {
    throw new Error(`unknown attribute ${attribute}`);
  }
  return schema.attributes[idx].values[labels[idx]];
}

export function selectManipulation(
  state: SessionState,
  schema: Schema,
  attribute: string,
  value: string,
): SessionState {
  if (state.queryLabels === null) {
    throw new Error("select a query image first");
  }
  if (currentValueName(schema, state.queryLabels, attribute) === value) {
    throw new Error("target value equals the image's current value");
  }
  return { ...state, attribute, value };
}

export function canSubmit(state: SessionState): boolean {
  return state.queryId !== null && state.attribute !== null &&
    state.value !== null && state.k >= 1;
}

export function withResponse(state: SessionState, response: QueryResponse): SessionState {
  return { ...state, lastResponse: response };
}

export function toggleOverlay(state: SessionState, attribute: string): SessionState {
  return {
    ...state,
    overlayAttribute: state.overlayAttribute === attribute ? null : attribute,
  };
}

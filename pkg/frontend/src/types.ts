export interface AttributeDef {
  name: string;
  values: string[];
}

export interface Schema {
  attributes: AttributeDef[];
}

export interface ResultEntry {
  id: string;
  distance: number;
  labels: number[];
  hit: boolean;
}

export interface QueryResponse {
  manipulated_attribute: string;
  target_labels: number[];
  results: ResultEntry[];
}

export interface ImageRecord {
  id: string;
  labels: number[];
}

export interface BoxRecord {
  attribute: string;
  class: string;
  box: { y1: number; x1: number; y2: number; x2: number };
}

export interface ApiError {
  error: { code: string; message: string; field?: string };
}

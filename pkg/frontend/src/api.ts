import { BoxRecord, ImageRecord, QueryResponse, Schema } from "./types.js";

export class ApiClient {
  constructor(private baseUrl: string = "") {}

  private async getJson<T>(path: string, signal?: AbortSignal): Promise<T> {
    const resp = await fetch(this.baseUrl + path, { signal });
    if (!resp.ok) {
      throw await this.toError(resp);
    }
    return (await resp.json()) as T;
  }

  private async toError(resp: Response): Promise<Error> {
    try {
      const body = await resp.json();
      const err = body?.error;
      const field = err?.field ? ` (${err.field})` : "";
      return new Error(`${err?.code ?? resp.status}: ${err?.message ?? "request failed"}${field}`);
    } catch {
      return new Error(`http ${resp.status}`);
    }
  }

  schema(): Promise<Schema> {
    return this.getJson<Schema>("/schema");
  }

  async queryImages(): Promise<ImageRecord[]> {
    const body = await this.getJson<{ images: ImageRecord[] }>("/images?split=query");
    return body.images;
  }

  async runQuery(
    queryId: string,
    attribute: string,
    value: string,
    k: number,
    signal?: AbortSignal,
  ): Promise<QueryResponse> {
    const resp = await fetch(this.baseUrl + "/query", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ query_id: queryId, attribute, value, k }),
      signal,
    });
    if (!resp.ok) {
      throw await this.toError(resp);
    }
    return (await resp.json()) as QueryResponse;
  }

  aamBox(imageId: string, attribute: string, signal?: AbortSignal): Promise<BoxRecord> {
    return this.getJson<BoxRecord>(`/aam/${imageId}/${attribute}/box`, signal);
  }

  aamPngUrl(imageId: string, attribute: string): string {
    return `${this.baseUrl}/aam/${imageId}/${attribute}`;
  }

  thumbnailUrl(imageId: string): string {
    return `${this.baseUrl}/gallery/${imageId}/thumbnail`;
  }
}

/** Typed client for the service HTTP/JSON API. */

export interface CaseSummary {
  case_id: string;
  study_uid: string;
  site_tag: string;
  pushed_by: string;
  created_at: string;
  label: string;
  partitions: string[];
  status: string;
  case_score: number | null;
  result_id: string | null;
  report_kind: string | null;
  annotation_count: number;
}

export interface Lesion {
  component_id: number;
  voxel_count: number;
  volume_ml: number;
  confidence: number;
}

export interface CaseBundle {
  case_id: string;
  study_uid: string;
  label: string;
  rows: number;
  cols: number;
  n_slices: number;
  spacing: number[];
  window: number[];
  slices: string[];
  heatmap: string[];
  mask_rle: number[][][];
  lesions: Lesion[];
  case_score: number;
  total_volume_ml: number;
  report: { kind: string; disclaimer: string };
  result_id: string;
  model_versions: number[];
}

export interface AnnotationPayload {
  error_class: string;
  author: string;
  result_id?: string | null;
  corrected_mask_rle?: number[][][] | null;
}

export interface StoredAnnotation {
  annotation_id: string;
  case_id: string;
  result_id: string | null;
  error_class: string;
  corrected_mask_ref: string | null;
  author: string;
  created_at: string;
  corrected_mask_rle?: number[][][];
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class ApiClient {
  constructor(private baseUrl: string = "", private token: string | null = null) {}

  private headers(json = false): Record<string, string> {
    const headers: Record<string, string> = {};
    if (json) headers["Content-Type"] = "application/json";
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    return headers;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await fetch(this.baseUrl + path, {
      method,
      headers: this.headers(body !== undefined),
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await response.text();
    if (!response.ok) {
      throw new ApiError(response.status, text || response.statusText);
    }
    return JSON.parse(text) as T;
  }

  async worklist(filter?: { status?: string; partition?: string }): Promise<CaseSummary[]> {
    const params = new URLSearchParams();
    if (filter?.status) params.set("status", filter.status);
    if (filter?.partition) params.set("partition", filter.partition);
    const query = params.toString();
    const out = await this.request<{ cases: CaseSummary[] }>(
      "GET", "/api/worklist" + (query ? `?${query}` : ""),
    );
    return out.cases;
  }

  async bundle(caseId: string): Promise<CaseBundle> {
    return this.request<CaseBundle>("GET", `/api/cases/${caseId}/bundle`);
  }

  async submitAnnotation(caseId: string, payload: AnnotationPayload): Promise<string> {
    const out = await this.request<{ annotation_id: string }>(
      "POST", `/api/cases/${caseId}/annotations`, payload,
    );
    return out.annotation_id;
  }

  async annotations(caseId: string): Promise<StoredAnnotation[]> {
    const out = await this.request<{ annotations: StoredAnnotation[] }>(
      "GET", `/api/cases/${caseId}/annotations`,
    );
    return out.annotations;
  }

  async models(): Promise<Record<string, unknown>[]> {
    const out = await this.request<{ models: Record<string, unknown>[] }>(
      "GET", "/api/models",
    );
    return out.models;
  }

  /** Triggers a round and returns the final outcome (progress lines skipped). */
  async runRound(config: unknown): Promise<Record<string, any>> {
    const response = await fetch(this.baseUrl + "/api/rounds", {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify(config),
    });
    const text = await response.text();
    const lines = text.trim().split("\n").map((line) => JSON.parse(line));
    const last = lines[lines.length - 1];
    if (last.error) {
      throw new ApiError(409, `${last.error}: ${last.message ?? ""}`);
    }
    return last.outcome;
  }
}

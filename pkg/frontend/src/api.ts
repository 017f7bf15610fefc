// Typed client for the annotation service endpoints.

import type { DomainSchema } from "./state.js";

export interface SampleView {
  sample_id: string;
  term: string;
  output_text: string;
}

export interface Progress {
  completed: number;
  total: number;
}

export interface NextResponse {
  done: boolean;
  sample: SampleView | null;
  progress: Progress;
}

export interface SubmitResponse {
  ok: boolean;
  replaced: boolean;
}

export interface AgreementRow {
  criterion: string;
  alpha: number;
  alpha_degenerate: boolean;
  percent: number;
  n_samples: number;
  n_annotators: number;
}

export interface StatsResponse {
  n_records: number;
  n_samples: number;
  agreement: AgreementRow[];
  manual_means: Record<string, Record<string, number>>;
  ties?: string[];
}

export class ApiError extends Error {
  constructor(readonly status: number, readonly detail: string) {
    super(`HTTP ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class AnnotationApi {
  private fetchFn: FetchLike;

  constructor(private baseUrl = "", fetchFn?: FetchLike) {
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = await response.json();
        if (body && typeof body.detail === "string") {
          detail = body.detail;
        }
      } catch {
        // not JSON; keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  domains(): Promise<DomainSchema> {
    return this.json("/api/domains");
  }

  next(token: string): Promise<NextResponse> {
    return this.json(`/api/next?annotator=${encodeURIComponent(token)}`);
  }

  // One retry after a dropped connection: the service replaces earlier
  // ratings for the same (sample, annotator), so a retried submit that
  // already landed cannot double-count.  HTTP-level rejections never retry.
  async submit(
    token: string,
    sampleId: string,
    values: Record<string, number>
  ): Promise<SubmitResponse> {
    const init: RequestInit = {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ token, sample_id: sampleId, ...values }),
    };
    try {
      return await this.json("/api/annotations", init);
    } catch (error) {
      if (error instanceof ApiError) {
        throw error;
      }
      return await this.json("/api/annotations", init);
    }
  }

  stats(): Promise<StatsResponse> {
    return this.json("/api/stats");
  }

  async exportJsonl(): Promise<string> {
    const response = await this.fetchFn(`${this.baseUrl}/api/export`);
    if (!response.ok) {
      throw new ApiError(response.status, response.statusText);
    }
    return response.text();
  }
}

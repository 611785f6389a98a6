/** Typed client for the oracle-console endpoints. Zero configuration: the
 * console is served by the same process that hosts the API, so every call is
 * same-origin relative. */

export interface QueueItem {
  id: number;
  image: string; // base64 PNG
  certainty: number;
  member_top_scores: number[];
  suggested_label: string;
  enqueued_at: number;
}

export interface ClassInfo {
  name: string;
  count: number;
  known: boolean;
}

export interface RunStatus {
  cycle: number;
  alpha: number;
  queue_depth: number;
  last_stacked_accuracy: number | null;
  known_classes: string[];
  retraining: boolean;
  oracle_mode: string;
}

export interface LabelResponse {
  status?: string;
  label?: string;
  retrain_triggered?: boolean;
  new_classes?: string[];
  staged_count?: number;
  queue_depth?: number;
  error?: string;
  code?: number;
}

export interface ApiResult<T> {
  ok: boolean;
  status: number;
  body: T;
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async get<T>(path: string): Promise<ApiResult<T>> {
    const res = await this.fetchImpl(this.base + path);
    return { ok: res.ok, status: res.status, body: (await res.json()) as T };
  }

  private async post<T>(path: string, payload: unknown): Promise<ApiResult<T>> {
    const res = await this.fetchImpl(this.base + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    return { ok: res.ok, status: res.status, body: (await res.json()) as T };
  }

  queue(): Promise<ApiResult<QueueItem[]>> {
    return this.get("/api/queue");
  }

  classes(): Promise<ApiResult<ClassInfo[]>> {
    return this.get("/api/classes");
  }

  status(): Promise<ApiResult<RunStatus>> {
    return this.get("/api/status");
  }

  label(id: number, label: string): Promise<ApiResult<LabelResponse>> {
    return this.post(`/api/queue/${id}/label`, { label });
  }

  registerClass(name: string): Promise<ApiResult<{ name?: string; error?: string }>> {
    return this.post("/api/classes", { name });
  }
}

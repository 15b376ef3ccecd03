/**
 * Typed client for the trial session API.  The fetch implementation is
 * injectable so tests can replay recorded server fixtures byte for byte.
 */

import type {
  AllocationInfo,
  ApiError,
  CreateSessionRequest,
  PosteriorSummary,
  SessionInfo,
  SubmitResponseRequest,
  SubmitResult,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiRequestError extends Error {
  constructor(public status: number, public error: ApiError) {
    super(`${error.code}: ${error.message}`);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method, headers: { "content-type": "application/json" } };
    if (body !== undefined) {
      init.body = JSON.stringify(body);
    }
    const resp = await this.fetchImpl(this.baseUrl + path, init);
    const payload = await resp.json();
    if (!resp.ok) {
      throw new ApiRequestError(resp.status, payload.error as ApiError);
    }
    return payload as T;
  }

  async createSession(body: CreateSessionRequest): Promise<SessionInfo> {
    const payload = await this.request<{ session: SessionInfo }>("POST", "/sessions", body);
    return payload.session;
  }

  async listSessions(): Promise<SessionInfo[]> {
    const payload = await this.request<{ sessions: SessionInfo[] }>("GET", "/sessions");
    return payload.sessions;
  }

  async getSession(id: string): Promise<SessionInfo> {
    const payload = await this.request<{ session: SessionInfo }>("GET", `/sessions/${id}`);
    return payload.session;
  }

  async getAllocation(id: string): Promise<AllocationInfo> {
    const payload = await this.request<{ allocation: AllocationInfo }>(
      "GET", `/sessions/${id}/allocation`);
    return payload.allocation;
  }

  async submitResponse(id: string, body: SubmitResponseRequest): Promise<SubmitResult> {
    const payload = await this.request<{ result: SubmitResult }>(
      "POST", `/sessions/${id}/responses`, body);
    return payload.result;
  }

  async getPosterior(id: string): Promise<PosteriorSummary> {
    const payload = await this.request<{ posterior: PosteriorSummary }>(
      "GET", `/sessions/${id}/posterior`);
    return payload.posterior;
  }
}

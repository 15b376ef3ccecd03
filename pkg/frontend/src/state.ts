/**
 * Client-side session flow mirroring the server's status machine.
 *
 * The server owns the truth; this class caches the latest session info,
 * pending allocation, and posterior, exposes only the actions the current
 * status allows, and absorbs optimistic-action conflicts (e.g. a double
 * submit) by re-syncing instead of surfacing an error.
 */

import { ApiClient, ApiRequestError } from "./api.js";
import type {
  AllocationInfo,
  PosteriorSummary,
  SessionInfo,
  SessionStatus,
} from "./types.js";

export type UiAction = "allocate" | "submit" | "refresh";

export class SessionFlow {
  info: SessionInfo;
  allocation: AllocationInfo | null = null;
  posterior: PosteriorSummary | null = null;

  constructor(private api: ApiClient, info: SessionInfo) {
    this.info = info;
  }

  static async create(api: ApiClient, request: Parameters<ApiClient["createSession"]>[0]):
    Promise<SessionFlow> {
    const info = await api.createSession(request);
    const flow = new SessionFlow(api, info);
    await flow.refreshPosterior();
    return flow;
  }

  static async open(api: ApiClient, id: string): Promise<SessionFlow> {
    const info = await api.getSession(id);
    const flow = new SessionFlow(api, info);
    await flow.refreshPosterior();
    if (info.status === "awaiting-response") {
      flow.allocation = await api.getAllocation(id);
    }
    return flow;
  }

  get status(): SessionStatus {
    return this.info.status;
  }

  /** The UI must offer nothing the current status forbids. */
  availableActions(): UiAction[] {
    switch (this.info.status) {
      case "awaiting-allocation":
        return ["allocate", "refresh"];
      case "awaiting-response":
        return ["submit", "refresh"];
      case "complete":
        return ["refresh"];
    }
  }

  async refresh(): Promise<void> {
    this.info = await this.api.getSession(this.info.id);
    if (this.info.status !== "awaiting-response") {
      this.allocation = null;
    }
    await this.refreshPosterior();
  }

  async refreshPosterior(): Promise<void> {
    this.posterior = await this.api.getPosterior(this.info.id);
  }

  async requestAllocation(): Promise<AllocationInfo> {
    this.allocation = await this.api.getAllocation(this.info.id);
    this.info = await this.api.getSession(this.info.id);
    return this.allocation;
  }

  /**
   * Submit the observed response for the pending allocation.  A cursor or
   * status conflict (double click, stale tab) is absorbed by re-syncing:
   * if the server has already recorded the slot we report success.
   */
  async submitResponse(treatment: 0 | 1, response: number):
    Promise<{ duplicate: boolean }> {
    if (!this.allocation) {
      throw new Error("no pending allocation");
    }
    const pending = this.allocation;
    try {
      const result = await this.api.submitResponse(this.info.id, {
        patient: pending.patient,
        cycle: pending.cycle,
        slot: pending.slot,
        treatment,
        response,
      });
      this.posterior = result.posterior;
      this.allocation = null;
      this.info = await this.api.getSession(this.info.id);
      return { duplicate: false };
    } catch (err) {
      if (err instanceof ApiRequestError &&
          (err.error.code === "cursor_conflict" || err.error.code === "status_conflict")) {
        await this.refresh();
        const recorded = this.info.observations.some(
          (o) => o.patient === pending.patient && o.cycle === pending.cycle &&
            o.slot === pending.slot,
        );
        if (recorded) {
          this.allocation = null;
          return { duplicate: true };
        }
      }
      await this.refresh();
      throw err;
    }
  }
}

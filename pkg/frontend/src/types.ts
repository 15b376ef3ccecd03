/**
 * Server payload shapes for the trial session API (version 1).
 *
 * Field names mirror the HTTP contract exactly; the UI renders these values
 * verbatim and never derives statistics of its own.
 */

export type Family = "normal" | "lognormal";
export type DirectionPref = "lower" | "higher";
export type PolicyKindName = "optimal" | "mab" | "randomized";
export type SessionStatus = "awaiting-allocation" | "awaiting-response" | "complete";

export interface PolicySpec {
  kind: PolicyKindName;
  q_utility: number;
  q_mab: number;
}

export interface SessionSpec {
  family: Family;
  direction: DirectionPref;
  n_patients: number;
  n_cycles: number;
  slots_per_cycle: number;
  policy: PolicySpec;
  prior: Record<string, { mean: number; sd: number }>;
  seed: number;
}

export interface CursorInfo {
  cycle: number;
  patient: number;
  slot: number;
  step: number;
}

export interface ObservationRecord {
  patient: number;
  cycle: number;
  slot: number;
  treatment: 0 | 1;
  response: number;
}

export interface SessionInfo {
  id: string;
  status: SessionStatus;
  created_at: string;
  updated_at: string;
  cursor: CursorInfo | null;
  n_observations: number;
  observations: ObservationRecord[];
  total_steps: number;
  spec: SessionSpec;
}

export interface AllocationInfo {
  step: number;
  cycle: number;
  patient: number;
  slot: number;
  recommended: 0 | 1;
  diagnostics: {
    pre_randomized?: boolean;
    expected_utility?: { "0": number | null; "1": number | null };
    reward_probability?: { "0": number; "1": number };
  };
}

export interface PopulationRow {
  name: string;
  mean: number;
  sd: number;
  lower95: number;
  upper95: number;
}

export interface PatientRow {
  patient: number;
  effect_mean: number;
  effect_sd: number;
  lower95: number;
  upper95: number;
  p_best: { "0": number; "1": number };
  preferred: 0 | 1;
}

export interface PosteriorSummary {
  population: PopulationRow[];
  patients: PatientRow[];
  log_det: number | null;
  log_det_history: { cycle: number; log_det: number }[];
  n_observations: number;
}

export interface ApiError {
  code: string;
  message: string;
  field?: string;
  details?: { field: string; message: string }[];
}

export interface CreateSessionRequest {
  family: Family;
  direction: DirectionPref;
  n_patients: number;
  n_cycles: number;
  policy: { kind: PolicyKindName; q_utility?: number; q_mab?: number };
  seed?: number;
}

export interface SubmitResponseRequest {
  patient: number;
  cycle: number;
  slot: number;
  treatment: 0 | 1;
  response: number;
}

export interface SubmitResult {
  accepted: boolean;
  observation: ObservationRecord;
  status: SessionStatus;
  posterior: PosteriorSummary;
}

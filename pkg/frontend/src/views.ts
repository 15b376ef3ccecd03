/**
 * Pure view-model builders: server payloads in, display strings out.
 *
 * Every statistic is rendered with show(), the raw JSON value's canonical
 * string, so a displayed number is always byte-traceable to a server field.
 * The only local arithmetic is presentation (percent widths for bars).
 */

import type {
  AllocationInfo,
  ObservationRecord,
  PolicyKindName,
  PosteriorSummary,
  SessionInfo,
} from "./types.js";

export function show(value: number | string | null | undefined): string {
  if (value === null || value === undefined) {
    return "—";
  }
  return String(value);
}

export const ARM_LABELS: Record<0 | 1, string> = {
  0: "placebo (0)",
  1: "treatment (1)",
};

export interface HeaderView {
  title: string;
  status: string;
  progress: string;
  cursor: string;
}

export function sessionHeaderView(info: SessionInfo): HeaderView {
  const cursor = info.cursor
    ? `patient ${show(info.cursor.patient)}, cycle ${show(info.cursor.cycle)}, slot ${show(info.cursor.slot)}`
    : "trial complete";
  return {
    title: `Session ${info.id}`,
    status: info.status,
    progress: `${show(info.n_observations)} / ${show(info.total_steps)} observations`,
    cursor,
  };
}

export interface AllocationView {
  heading: string;
  recommendedLabel: string;
  badge: string | null;
  rows: { label: string; value: string; highlighted: boolean }[];
  barPair: { label: string; value: string; percent: number }[] | null;
}

export function allocationView(alloc: AllocationInfo, policy: PolicyKindName): AllocationView {
  const heading = `Next: patient ${show(alloc.patient)}, cycle ${show(alloc.cycle)}, slot ${show(alloc.slot)}`;
  const recommendedLabel = ARM_LABELS[alloc.recommended];
  if (policy === "randomized") {
    return {
      heading,
      recommendedLabel,
      badge: "pre-randomized",
      rows: [],
      barPair: null,
    };
  }
  if (policy === "mab") {
    const probs = alloc.diagnostics.reward_probability!;
    return {
      heading,
      recommendedLabel,
      badge: null,
      rows: [],
      barPair: ([0, 1] as const).map((arm) => ({
        label: ARM_LABELS[arm],
        value: show(probs[String(arm) as "0" | "1"]),
        percent: probs[String(arm) as "0" | "1"] * 100,
      })),
    };
  }
  const utils = alloc.diagnostics.expected_utility!;
  const u0 = utils["0"];
  const u1 = utils["1"];
  const best: 0 | 1 = u1 !== null && (u0 === null || u1 > u0) ? 1 : 0;
  return {
    heading,
    recommendedLabel,
    badge: null,
    rows: ([0, 1] as const).map((arm) => ({
      label: `expected gain, ${ARM_LABELS[arm]}`,
      value: show(utils[String(arm) as "0" | "1"]),
      highlighted: arm === best,
    })),
    barPair: null,
  };
}

export interface IntervalRow {
  name: string;
  mean: string;
  sd: string;
  interval: string;
}

export interface PatientView {
  patient: string;
  effect: IntervalRow;
  preferredLabel: string;
  pBest: { arm0: string; arm1: string };
  flagged: boolean;  // preferred-arm probability above 0.9
}

export interface DashboardView {
  population: IntervalRow[];
  patients: PatientView[];
  logDet: string;
  logDetTrend: { cycle: string; value: string }[];
}

export function dashboardView(posterior: PosteriorSummary): DashboardView {
  return {
    population: posterior.population.map((row) => ({
      name: row.name,
      mean: show(row.mean),
      sd: show(row.sd),
      interval: `(${show(row.lower95)}, ${show(row.upper95)})`,
    })),
    patients: posterior.patients.map((row) => {
      const pPreferred = row.preferred === 1 ? row.p_best["1"] : row.p_best["0"];
      return {
        patient: show(row.patient),
        effect: {
          name: `patient ${show(row.patient)} treatment effect`,
          mean: show(row.effect_mean),
          sd: show(row.effect_sd),
          interval: `(${show(row.lower95)}, ${show(row.upper95)})`,
        },
        preferredLabel: ARM_LABELS[row.preferred],
        pBest: { arm0: show(row.p_best["0"]), arm1: show(row.p_best["1"]) },
        flagged: pPreferred > 0.9,
      };
    }),
    logDet: show(posterior.log_det),
    logDetTrend: posterior.log_det_history.map((entry) => ({
      cycle: show(entry.cycle),
      value: show(entry.log_det),
    })),
  };
}

export interface HistoryRowView {
  label: string;
  treatment: string;
  response: string;
}

export function historyView(observations: ObservationRecord[]): HistoryRowView[] {
  return observations.map((obs) => ({
    label: `patient ${show(obs.patient)}, cycle ${show(obs.cycle)}, slot ${show(obs.slot)}`,
    treatment: ARM_LABELS[obs.treatment],
    response: show(obs.response),
  }));
}

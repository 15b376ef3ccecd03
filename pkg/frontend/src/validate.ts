/**
 * Client-side validation mirroring the server's session rules, so obviously
 * bad input never leaves the browser.  Must stay in sync with the service's
 * request models.
 */

import { z } from "zod";
import type { CreateSessionRequest, Family } from "./types.js";

export const wizardSchema = z.object({
  family: z.enum(["normal", "lognormal"]),
  direction: z.enum(["lower", "higher"]),
  n_patients: z.number().int("must be a whole number").min(1, "at least one patient"),
  n_cycles: z.number().int("must be a whole number").min(1, "at least one cycle"),
  policy: z.object({
    kind: z.enum(["optimal", "mab", "randomized"]),
    q_utility: z.number().int().min(100, "at least 100 draws").optional(),
    q_mab: z.number().int().min(100, "at least 100 draws").optional(),
  }),
  seed: z.number().int().optional(),
});

export interface FieldErrors {
  [path: string]: string;
}

export function validateWizard(form: unknown):
  { ok: true; value: CreateSessionRequest } | { ok: false; errors: FieldErrors } {
  const parsed = wizardSchema.safeParse(form);
  if (parsed.success) {
    return { ok: true, value: parsed.data as CreateSessionRequest };
  }
  const errors: FieldErrors = {};
  for (const issue of parsed.error.issues) {
    errors[issue.path.join(".")] = issue.message;
  }
  return { ok: false, errors };
}

/** Response-entry rule: numeric, and strictly positive for log-normal sessions. */
export function validateResponseValue(raw: string, family: Family):
  { ok: true; value: number } | { ok: false; error: string } {
  const value = Number(raw);
  if (raw.trim() === "" || !Number.isFinite(value)) {
    return { ok: false, error: "enter a numeric response" };
  }
  if (family === "lognormal" && value <= 0) {
    return { ok: false, error: "log-normal responses must be positive" };
  }
  return { ok: true, value };
}

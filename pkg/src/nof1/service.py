"""HTTP session service for conducting a live adaptive trial.

A session wraps a live-mode trial: the engine recommends the next allocation,
a human coordinator administers a treatment (possibly deviating from the
recommendation) and submits the observed response, and the posterior is
refit and persisted.  Sessions are held as append-only event logs on disk
(spec, allocations, responses); the posterior is derived state recomputed on
load, so a crash-restart resumes exactly.

Status machine: awaiting-allocation -> awaiting-response -> (awaiting-allocation | complete).
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .engine import Proposal, TrialConfig, TrialState, accept, derived_rng, propose
from .errors import ContractError, DataError, FitFailure, Nof1Error
from .model import PARAM_NAMES, Direction, PriorSpec, ResponseFamily
from .policies import PolicyConfig, PolicyKind, mab_reward_probability

API_VERSION = 1
Z_95 = 1.959964

AWAITING_ALLOCATION = "awaiting-allocation"
AWAITING_RESPONSE = "awaiting-response"
COMPLETE = "complete"


class ServiceError(Exception):
    """Error visible to API clients, carrying a machine-readable code."""

    def __init__(self, status: int, code: str, message: str, field: str | None = None):
        self.status = status
        self.code = code
        self.message = message
        self.field = field
        super().__init__(message)

    def body(self) -> dict:
        err = {"code": self.code, "message": self.message}
        if self.field:
            err["field"] = self.field
        return {"version": API_VERSION, "error": err}


# ---------------------------------------------------------------------------
# request models
# ---------------------------------------------------------------------------

class PolicyBody(BaseModel):
    kind: Literal["optimal", "mab", "randomized"]
    q_utility: int = Field(default=200, ge=100)
    q_mab: int = Field(default=1000, ge=100)


class PriorCoordinate(BaseModel):
    mean: float
    sd: float = Field(gt=0)


class CreateSessionBody(BaseModel):
    family: Literal["normal", "lognormal"]
    direction: Literal["lower", "higher"]
    n_patients: int = Field(ge=1)
    n_cycles: int = Field(ge=1)
    policy: PolicyBody
    prior: Optional[dict[str, PriorCoordinate]] = None
    seed: Optional[int] = None


class SubmitResponseBody(BaseModel):
    patient: int
    cycle: int
    slot: int
    treatment: Literal[0, 1]
    response: float


# ---------------------------------------------------------------------------
# session
# ---------------------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class Session:
    id: str
    state: TrialState
    status: str
    pending: Proposal | None
    created_at: str
    updated_at: str
    lock: threading.Lock

    def info(self) -> dict:
        config = self.state.config
        cursor = None
        if not self.state.complete:
            cycle, patient, slot = self.state.cursor()
            cursor = {"cycle": cycle, "patient": patient, "slot": slot,
                      "step": self.state.step_index}
        return {
            "id": self.id,
            "status": self.status,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "cursor": cursor,
            "n_observations": len(self.state.observations),
            "observations": [o.to_record() for o in self.state.observations],
            "total_steps": config.total_steps,
            "spec": {
                "family": config.family.value,
                "direction": config.direction.value,
                "n_patients": config.n_patients,
                "n_cycles": config.n_cycles,
                "slots_per_cycle": config.slots_per_cycle,
                "policy": config.policy.to_record(),
                "prior": config.prior.to_record(),
                "seed": config.policy_seed,
            },
        }


def _session_config(body: CreateSessionBody, seed: int) -> TrialConfig:
    prior = PriorSpec.default()
    if body.prior is not None:
        means = prior.means.copy()
        sds = prior.sds.copy()
        for name, coord in body.prior.items():
            if name not in PARAM_NAMES:
                raise ServiceError(422, "validation",
                                   f"unknown prior coordinate {name!r}", field=f"prior.{name}")
            i = PARAM_NAMES.index(name)
            means[i] = coord.mean
            sds[i] = coord.sd
        prior = PriorSpec(means, sds)
    policy = PolicyConfig(
        kind=PolicyKind(body.policy.kind),
        q_utility=body.policy.q_utility,
        q_mab=body.policy.q_mab,
    )
    return TrialConfig(
        n_patients=body.n_patients,
        n_cycles=body.n_cycles,
        family=ResponseFamily(body.family),
        direction=Direction(body.direction),
        prior=prior,
        policy=policy,
        scenario=None,
        policy_seed=seed,
    )


class SessionStore:
    """Durable session registry: one append-only JSONL event log per session."""

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        (self.data_dir / "sessions").mkdir(parents=True, exist_ok=True)
        self._sessions: dict[str, Session] = {}
        self._registry_lock = threading.Lock()

    def _path(self, session_id: str) -> Path:
        return self.data_dir / "sessions" / f"{session_id}.jsonl"

    def _append(self, session_id: str, event: dict) -> None:
        with open(self._path(session_id), "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def create(self, body: CreateSessionBody) -> Session:
        session_id = uuid.uuid4().hex
        seed = body.seed if body.seed is not None else int.from_bytes(os.urandom(6), "big")
        config = _session_config(body, seed)
        try:
            state = TrialState(config)
        except Nof1Error as exc:
            raise ServiceError(422, "validation", str(exc))
        now = _now()
        session = Session(
            id=session_id, state=state,
            status=AWAITING_ALLOCATION if not state.complete else COMPLETE,
            pending=None, created_at=now, updated_at=now,
            lock=threading.Lock(),
        )
        self._append(session_id, {
            "type": "created", "at": now,
            "config": config.to_record(),
        })
        with self._registry_lock:
            self._sessions[session_id] = session
        return session

    def get(self, session_id: str) -> Session:
        with self._registry_lock:
            if session_id in self._sessions:
                return self._sessions[session_id]
        session = self._load(session_id)
        with self._registry_lock:
            return self._sessions.setdefault(session_id, session)

    def list_ids(self) -> list[str]:
        on_disk = sorted(p.stem for p in (self.data_dir / "sessions").glob("*.jsonl"))
        return on_disk

    def _load(self, session_id: str) -> Session:
        path = self._path(session_id)
        if not path.exists():
            raise ServiceError(404, "not_found", f"no session {session_id!r}")
        events = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        if not events or events[0]["type"] != "created":
            raise ServiceError(500, "corrupt_log", f"session log {session_id!r} has no creation event")
        config = TrialConfig.from_record(events[0]["config"])
        state = TrialState(config)
        created_at = events[0]["at"]
        updated_at = created_at
        pending: Proposal | None = None
        for event in events[1:]:
            updated_at = event.get("at", updated_at)
            if event["type"] == "allocation":
                pending = Proposal(
                    step=event["step"], cycle=event["cycle"], patient=event["patient"],
                    slot=event["slot"], treatment=event["recommended"],
                    diagnostics=event["diagnostics"],
                )
            elif event["type"] == "response":
                accept(state, int(event["treatment"]), float(event["response"]))
                pending = None
        if state.complete:
            status = COMPLETE
        elif pending is not None:
            status = AWAITING_RESPONSE
        else:
            status = AWAITING_ALLOCATION
        return Session(
            id=session_id, state=state, status=status, pending=pending,
            created_at=created_at, updated_at=updated_at, lock=threading.Lock(),
        )

    # -- session operations --------------------------------------------------

    def next_allocation(self, session: Session) -> dict:
        with session.lock:
            if session.status == COMPLETE:
                raise ServiceError(409, "session_complete", "trial is complete")
            if session.status == AWAITING_RESPONSE:
                proposal = session.pending  # idempotent until a response arrives
            else:
                proposal = propose(session.state)
                now = _now()
                self._append(session.id, {
                    "type": "allocation", "at": now,
                    "step": proposal.step, "cycle": proposal.cycle,
                    "patient": proposal.patient, "slot": proposal.slot,
                    "recommended": proposal.treatment,
                    "diagnostics": proposal.diagnostics,
                })
                session.pending = proposal
                session.status = AWAITING_RESPONSE
                session.updated_at = now
            return {
                "step": proposal.step,
                "cycle": proposal.cycle,
                "patient": proposal.patient,
                "slot": proposal.slot,
                "recommended": proposal.treatment,
                "diagnostics": proposal.diagnostics,
            }

    def submit_response(self, session: Session, body: SubmitResponseBody) -> dict:
        with session.lock:
            if session.status == COMPLETE:
                raise ServiceError(409, "session_complete", "trial is complete")
            if session.status != AWAITING_RESPONSE or session.pending is None:
                raise ServiceError(409, "status_conflict",
                                   "request an allocation before submitting a response")
            pending = session.pending
            if (body.patient, body.cycle, body.slot) != (pending.patient, pending.cycle, pending.slot):
                raise ServiceError(
                    409, "cursor_conflict",
                    f"expected (patient={pending.patient}, cycle={pending.cycle}, "
                    f"slot={pending.slot}), got (patient={body.patient}, "
                    f"cycle={body.cycle}, slot={body.slot})",
                )
            try:
                observation = accept(session.state, body.treatment, body.response)
            except DataError as exc:
                raise ServiceError(422, "validation", str(exc), field="response")
            except (FitFailure, ContractError) as exc:
                raise ServiceError(500, "fit_failure", str(exc))
            now = _now()
            self._append(session.id, {
                "type": "response", "at": now,
                "step": session.state.step_index - 1,
                "patient": body.patient, "cycle": body.cycle, "slot": body.slot,
                "treatment": body.treatment, "response": body.response,
            })
            session.pending = None
            session.status = COMPLETE if session.state.complete else AWAITING_ALLOCATION
            session.updated_at = now
            return {
                "accepted": True,
                "observation": observation.to_record(),
                "status": session.status,
                "posterior": posterior_summary(session),
            }


def posterior_summary(session: Session) -> dict:
    """Per-parameter and per-patient summaries of the current approximation."""
    state = session.state
    config = state.config
    posterior = state.posterior
    sds = np.sqrt(np.diag(posterior.cov))
    population = []
    for i, name in enumerate(PARAM_NAMES):
        mean = float(posterior.mean[i])
        sd = float(sds[i])
        population.append({
            "name": name, "mean": mean, "sd": sd,
            "lower95": mean - Z_95 * sd, "upper95": mean + Z_95 * sd,
        })
    patients = []
    beta1_mean = float(posterior.mean[1])
    beta1_var = float(posterior.cov[1, 1])
    for idx, patient in enumerate(posterior.patients):
        b1_mean = float(posterior.re_means[idx, 1])
        b1_var = float(posterior.re_cov_block(idx)[1, 1])
        effect_mean = beta1_mean + b1_mean  # cross block is exactly zero
        effect_sd = float(np.sqrt(beta1_var + b1_var))
        rng = derived_rng(config.policy_seed, 2, state.step_index, idx)
        p0, p1 = mab_reward_probability(
            posterior, patient, config.family, config.direction,
            config.policy.q_mab, rng,
        )
        patients.append({
            "patient": patient,
            "effect_mean": effect_mean,
            "effect_sd": effect_sd,
            "lower95": effect_mean - Z_95 * effect_sd,
            "upper95": effect_mean + Z_95 * effect_sd,
            "p_best": {"0": p0, "1": p1},
            "preferred": 0 if p0 >= p1 else 1,
        })
    return {
        "population": population,
        "patients": patients,
        "log_det": state.snapshots[-1].log_det_full if state.snapshots else None,
        "log_det_history": [
            {"cycle": snap.cycle, "log_det": snap.log_det_full}
            for snap in state.snapshots
        ],
        "n_observations": len(state.observations),
    }


# ---------------------------------------------------------------------------
# app
# ---------------------------------------------------------------------------

def create_app(data_dir, ui_dir=None) -> FastAPI:
    store = SessionStore(data_dir)
    app = FastAPI(title="nof1 trial service", version=str(API_VERSION))
    app.state.store = store

    @app.exception_handler(ServiceError)
    async def service_error_handler(_req: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status, content=exc.body())

    @app.exception_handler(RequestValidationError)
    async def validation_handler(_req: Request, exc: RequestValidationError):
        details = [
            {"field": ".".join(str(p) for p in err["loc"] if p != "body"),
             "message": err["msg"]}
            for err in exc.errors()
        ]
        return JSONResponse(status_code=422, content={
            "version": API_VERSION,
            "error": {"code": "validation", "message": "invalid request body",
                      "details": details},
        })

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        session = store.create(body)
        return {"version": API_VERSION, "session": session.info()}

    @app.get("/sessions")
    def list_sessions():
        infos = []
        for session_id in store.list_ids():
            infos.append(store.get(session_id).info())
        return {"version": API_VERSION, "sessions": infos}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return {"version": API_VERSION, "session": store.get(session_id).info()}

    @app.get("/sessions/{session_id}/allocation")
    def next_allocation(session_id: str):
        session = store.get(session_id)
        allocation = store.next_allocation(session)
        return {"version": API_VERSION, "allocation": allocation,
                "status": session.status}

    @app.post("/sessions/{session_id}/responses")
    def submit_response(session_id: str, body: SubmitResponseBody):
        session = store.get(session_id)
        result = store.submit_response(session, body)
        return {"version": API_VERSION, "result": result}

    @app.get("/sessions/{session_id}/posterior")
    def get_posterior(session_id: str):
        session = store.get(session_id)
        with session.lock:
            summary = posterior_summary(session)
        return {"version": API_VERSION, "posterior": summary, "status": session.status}

    if ui_dir is not None:
        from starlette.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app

"""External disambiguation of instances with ambiguous category evidence.

Flagged instances are turned into requests bundling the category evidence,
a textual summary of the reconstructed geometry, and up to M archived views
per candidate category.  Requests go to a pluggable decision client; the
scripted mock keeps tests hermetic, the HTTP client talks to any service
accepting ``{"prompt": ..., "images": [...]}`` and answering ``{"text": ...}``.
Decisions only ever set an instance's final category -- accumulated evidence
is never rewritten.
"""

from __future__ import annotations

import base64
import json
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

from .evidence import CategoricalDistribution, probabilities
from .voxelmap import InstanceRecord, MapState, VoxelKey

PROMPT_TEMPLATE = (
    "Please, help me to disambiguate the correct category of this object. "
    "Here, I provide you with my current evidence (in the form of a probability "
    "distribution over the potential categories), its 3D geometry through a "
    "voxel-based reconstruction, and a set of views of the object. Given this "
    "information, you have to provide an answer in the form of "
    '"The object category is <object_category>", where only the potential '
    "categories provided in the evidence are valid."
)

ANSWER_PHRASE = "the object category is"

GEOMETRY_VOXEL_CAP = 512

DEFAULT_MIN_PROB = 0.15
DEFAULT_VIEWS_PER_CANDIDATE = 3


class DisambiguationError(ValueError):
    """A request cannot be built for this instance."""


class DecisionParseError(ValueError):
    """The client response does not contain a usable decision."""


class ClientError(RuntimeError):
    """Transport-level failure while querying the decision client."""


@dataclass
class ViewRef:
    image_ref: str | None
    frame_id: int
    category: str
    confidence: float


@dataclass
class GeometrySummary:
    voxel_count: int
    bbox_min: VoxelKey
    bbox_max: VoxelKey
    voxels: list[VoxelKey]  # downsampled, capped at GEOMETRY_VOXEL_CAP


@dataclass
class DisambiguationRequest:
    instance_id: int
    evidence: CategoricalDistribution
    candidates: list[str]  # descending probability, >= 2 entries
    geometry: GeometrySummary
    views: list[ViewRef]
    prompt: str = ""


@dataclass
class DisambiguationDecision:
    instance_id: int
    chosen_category: str
    raw_response: str


@dataclass
class DisambiguationReport:
    decisions: list[DisambiguationDecision] = field(default_factory=list)
    parse_failures: list[tuple[int, str]] = field(default_factory=list)
    client_failures: list[tuple[int, str]] = field(default_factory=list)


def select_candidates(record: InstanceRecord, min_prob: float = DEFAULT_MIN_PROB) -> list[str]:
    """Candidate categories: everything at or above min_prob, at least the top 2.

    Ordered by descending probability; ties by label.  Raises when the
    instance has no category evidence at all.
    """
    if not record.category_evidence:
        raise DisambiguationError("nothing to disambiguate")
    dist = probabilities(record.category_evidence)
    ranked = sorted(dist.probs, key=lambda label: (-dist.probs[label], str(label)))
    selected = [label for label in ranked if dist.probs[label] >= min_prob]
    floor = min(2, len(ranked))
    if len(selected) < floor:
        selected = ranked[:floor]
    return [str(label) for label in selected]


def select_views(
    record: InstanceRecord,
    candidates: list[str],
    views_per_candidate: int = DEFAULT_VIEWS_PER_CANDIDATE,
) -> list[ViewRef]:
    """Per candidate, the highest-confidence observations of that category.

    Prefers distinct source frames; same-frame duplicates are used only when
    no alternative frames remain.  Returns fewer views when fewer exist.
    """
    views: list[ViewRef] = []
    for candidate in candidates:
        matching = [obs for obs in record.observations if obs.category == candidate]
        matching.sort(key=lambda obs: (-obs.confidence, obs.frame_id))
        chosen: list = []
        chosen_ids: set[int] = set()
        used_frames: set[int] = set()
        for obs in matching:
            if len(chosen) >= views_per_candidate:
                break
            if obs.frame_id not in used_frames:
                chosen.append(obs)
                chosen_ids.add(id(obs))
                used_frames.add(obs.frame_id)
        if len(chosen) < views_per_candidate:
            for obs in matching:
                if len(chosen) >= views_per_candidate:
                    break
                if id(obs) not in chosen_ids:
                    chosen.append(obs)
                    chosen_ids.add(id(obs))
        views.extend(
            ViewRef(
                image_ref=obs.view_path or f"frame:{obs.frame_id}",
                frame_id=obs.frame_id,
                category=obs.category,
                confidence=obs.confidence,
            )
            for obs in chosen
        )
    return views


def summarize_geometry(state: MapState, instance_id: int, cap: int = GEOMETRY_VOXEL_CAP) -> GeometrySummary:
    footprint = sorted(state.instance_footprint(instance_id))
    if not footprint:
        return GeometrySummary(voxel_count=0, bbox_min=(0, 0, 0), bbox_max=(0, 0, 0), voxels=[])
    lo = tuple(min(k[axis] for k in footprint) for axis in range(3))
    hi = tuple(max(k[axis] for k in footprint) for axis in range(3))
    stride = max(1, -(-len(footprint) // cap))
    return GeometrySummary(
        voxel_count=len(footprint),
        bbox_min=lo,  # type: ignore[arg-type]
        bbox_max=hi,  # type: ignore[arg-type]
        voxels=footprint[::stride][:cap],
    )


def build_prompt(request: DisambiguationRequest) -> str:
    """Template followed by a machine-readable appendix with the evidence."""
    lines = [PROMPT_TEMPLATE, "", "Evidence (probability per potential category):"]
    for label in request.candidates:
        lines.append(f"- {label}: {request.evidence[label]:.4f}")
    geometry = request.geometry
    lines.append(
        f"Geometry: {geometry.voxel_count} occupied voxels, "
        f"bounds {list(geometry.bbox_min)} to {list(geometry.bbox_max)}, "
        f"sample: {[list(v) for v in geometry.voxels[:16]]}"
    )
    lines.append(f"Views ({len(request.views)}):")
    for view in request.views:
        lines.append(
            f"- frame {view.frame_id}, predicted {view.category} "
            f"({view.confidence:.2f}): {view.image_ref}"
        )
    return "\n".join(lines)


def build_request(
    state: MapState,
    record: InstanceRecord,
    min_prob: float = DEFAULT_MIN_PROB,
    views_per_candidate: int = DEFAULT_VIEWS_PER_CANDIDATE,
) -> DisambiguationRequest:
    candidates = select_candidates(record, min_prob)
    if len(candidates) < 2:
        raise DisambiguationError(
            f"instance {record.id} has a single candidate category; nothing to disambiguate"
        )
    dist = probabilities(record.category_evidence)
    request = DisambiguationRequest(
        instance_id=record.id,
        evidence=CategoricalDistribution({str(k): v for k, v in dist.probs.items()}),
        candidates=candidates,
        geometry=summarize_geometry(state, record.id),
        views=select_views(record, candidates, views_per_candidate),
    )
    request.prompt = build_prompt(request)
    return request


def parse_decision(response: str, request: DisambiguationRequest) -> DisambiguationDecision:
    """Extract the category following the answer phrase, case-insensitively.

    The extracted category must be one of the request's candidates; anything
    else is a parse error and the caller keeps the instance flagged.
    """
    lowered = response.lower()
    position = lowered.find(ANSWER_PHRASE)
    if position < 0:
        raise DecisionParseError(f"answer phrase not found in {response!r}")
    tail = response[position + len(ANSWER_PHRASE):].strip().strip('"').strip()
    tail_lower = tail.lower()
    for candidate in sorted(request.candidates, key=len, reverse=True):
        lowered_candidate = candidate.lower()
        if tail_lower.startswith(lowered_candidate):
            rest = tail_lower[len(lowered_candidate):]
            if rest == "" or not rest[0].isalnum():
                return DisambiguationDecision(
                    instance_id=request.instance_id,
                    chosen_category=candidate,
                    raw_response=response,
                )
    raise DecisionParseError(f"no candidate category found in {response!r}")


class MockClient:
    """Scripted decision client keyed by instance id."""

    def __init__(self, responses: dict[str, str]) -> None:
        self.responses = {str(key): value for key, value in responses.items()}

    @classmethod
    def from_fixture_file(cls, path: Path | str) -> "MockClient":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def query(self, request: DisambiguationRequest) -> str:
        key = str(request.instance_id)
        if key not in self.responses:
            raise ClientError(f"no scripted response for instance {key}")
        return self.responses[key]


class ArgmaxClient:
    """Always answers the top-probability candidate (the top-1 baseline)."""

    def query(self, request: DisambiguationRequest) -> str:
        return f"The object category is {request.candidates[0]}"


class HttpClient:
    """Minimal JSON-over-HTTP decision client.

    Sends ``{"prompt": str, "images": [base64, ...]}`` and expects
    ``{"text": str}`` back.  Images are attached for views whose image_ref
    points at a readable file.
    """

    def __init__(
        self,
        endpoint: str,
        api_key_env: str = "",
        model: str = "",
        timeout_s: float = 30.0,
    ) -> None:
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.model = model
        self.timeout_s = timeout_s

    def query(self, request: DisambiguationRequest) -> str:
        images = []
        for view in request.views:
            if view.image_ref and Path(view.image_ref).is_file():
                images.append(base64.b64encode(Path(view.image_ref).read_bytes()).decode("ascii"))
        body: dict = {"prompt": request.prompt, "images": images}
        if self.model:
            body["model"] = self.model
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            token = os.environ.get(self.api_key_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        http_request = urllib.request.Request(
            self.endpoint, data=json.dumps(body).encode("utf-8"), headers=headers
        )
        try:
            with urllib.request.urlopen(http_request, timeout=self.timeout_s) as response:
                payload = json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise ClientError(str(exc)) from exc
        if "text" not in payload:
            raise ClientError(f"response missing 'text': {payload!r}")
        return str(payload["text"])


def disambiguate_all(
    state: MapState,
    client,
    min_prob: float = DEFAULT_MIN_PROB,
    views_per_candidate: int = DEFAULT_VIEWS_PER_CANDIDATE,
) -> DisambiguationReport:
    """Resolve every flagged instance through the client.

    Successful decisions set final_category and clear the flag; failures of
    any kind leave the instance flagged and are recorded per instance.
    Evidence is never mutated.
    """
    report = DisambiguationReport()
    for instance_id in sorted(state.instances):
        record = state.instances[instance_id]
        if record.is_unknown or not record.flagged:
            continue
        try:
            request = build_request(state, record, min_prob, views_per_candidate)
        except DisambiguationError as exc:
            report.parse_failures.append((instance_id, str(exc)))
            continue
        try:
            response = client.query(request)
        except Exception as exc:  # transport failures are never fatal to the batch
            report.client_failures.append((instance_id, str(exc)))
            continue
        try:
            decision = parse_decision(response, request)
        except DecisionParseError as exc:
            report.parse_failures.append((instance_id, str(exc)))
            continue
        record.final_category = decision.chosen_category
        record.flagged = False
        report.decisions.append(decision)
    return report

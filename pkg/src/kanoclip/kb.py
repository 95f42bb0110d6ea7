"""LLM/VQA knowledge base of anomaly descriptions.

The knowledge base stores, per class, the class-level descriptions produced by
a language model and the image-level descriptions produced by a visual
question answering model. Its encoded mean anchors the knowledge-driven loss
in :mod:`kanoclip.prompts`.

Clients are pluggable; :class:`FixtureClient` replays canned responses so that
building a knowledge base is hermetic and deterministic.
"""

from __future__ import annotations

import base64
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx
import torch
from PIL import Image

from .errors import (
    ClientFailure,
    EmptyClassName,
    EmptyKnowledge,
    InsufficientDescriptions,
    InvalidConfig,
    IOFailure,
    SchemaMismatch,
    UnknownClass,
    UnreadableImage,
)

logger = logging.getLogger(__name__)

KB_SCHEMA_VERSION = 1

CLASS_TEMPLATE = "Q: Describe what an abnormal image of {class} looks like?"
VQA_TEMPLATE = (
    "<IMAGE> + Q: Identify anomalies in the input image of the specified {class}. "
    "Describe each anomaly's location, color, shape, size, and other characteristics."
)
SOURCES = ("llm", "vqa", "fixture")


@dataclass
class PromptTemplateConfig:
    class_template: str = CLASS_TEMPLATE
    vqa_template: str = VQA_TEMPLATE
    n_class_descriptions: int = 5
    m_image_descriptions: int = 1
    retry_budget: int = 2
    # which auxiliary images are sent to the VQA model: "anomalous_only" | "all"
    vqa_source: str = "anomalous_only"

    def __post_init__(self):
        for name in ("class_template", "vqa_template"):
            if getattr(self, name).count("{class}") != 1:
                raise InvalidConfig(f"{name} must contain exactly one {{class}} placeholder")
        if self.n_class_descriptions < 1:
            raise InvalidConfig("n_class_descriptions must be >= 1")
        if self.m_image_descriptions < 0:
            raise InvalidConfig("m_image_descriptions must be >= 0")
        if self.retry_budget < 0:
            raise InvalidConfig("retry_budget must be >= 0")
        if self.vqa_source not in ("anomalous_only", "all"):
            raise InvalidConfig(f"unknown vqa_source {self.vqa_source!r}")


@dataclass(frozen=True)
class Description:
    text: str
    source: str
    image_id: str | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("descriptions must be non-empty")
        if self.source not in SOURCES:
            raise ValueError(f"unknown description source {self.source!r}")


@dataclass
class ClassKnowledge:
    llm: list[Description] = field(default_factory=list)
    vqa: list[Description] = field(default_factory=list)

    @property
    def n_llm(self) -> int:
        return len(self.llm)

    @property
    def n_vqa(self) -> int:
        return len(self.vqa)

    def texts(self) -> list[str]:
        return [d.text for d in self.llm] + [d.text for d in self.vqa]


@dataclass
class KnowledgeBase:
    entries: dict[str, ClassKnowledge] = field(default_factory=dict)

    def __contains__(self, class_name: str) -> bool:
        return class_name in self.entries

    def __getitem__(self, class_name: str) -> ClassKnowledge:
        try:
            return self.entries[class_name]
        except KeyError:
            raise UnknownClass(class_name) from None

    @property
    def classes(self) -> list[str]:
        return sorted(self.entries)

    def to_dict(self) -> dict:
        classes = {}
        for name in self.classes:
            entry = self.entries[name]
            classes[name] = {
                "llm": [{"text": d.text, "source": d.source} for d in entry.llm],
                "vqa": [
                    {"image_id": d.image_id, "text": d.text, "source": d.source}
                    for d in entry.vqa
                ],
            }
        return {"schema_version": KB_SCHEMA_VERSION, "classes": classes}

    @classmethod
    def from_dict(cls, data: Mapping) -> "KnowledgeBase":
        version = data.get("schema_version")
        if version != KB_SCHEMA_VERSION:
            raise SchemaMismatch(f"unsupported knowledge base schema version {version!r}")
        entries = {}
        for name, raw in data.get("classes", {}).items():
            entries[name] = ClassKnowledge(
                llm=[Description(d["text"], d["source"]) for d in raw.get("llm", [])],
                vqa=[
                    Description(d["text"], d["source"], d["image_id"])
                    for d in raw.get("vqa", [])
                ],
            )
        return cls(entries)


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    text = json.dumps(kb.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write knowledge base to {path}: {exc}") from exc


def load_kb(path: str | Path) -> KnowledgeBase:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IOFailure(f"cannot read knowledge base {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"{path} is not a knowledge base file: {exc}") from exc
    return KnowledgeBase.from_dict(data)


def _checked_class(class_name: str) -> str:
    if not class_name or not class_name.strip():
        raise EmptyClassName("class name must be non-empty")
    return class_name.strip()


def render_class_prompt(class_name: str, config: PromptTemplateConfig | None = None) -> str:
    template = (config or PromptTemplateConfig()).class_template
    return template.replace("{class}", _checked_class(class_name))


def render_vqa_prompt(class_name: str, config: PromptTemplateConfig | None = None) -> str:
    template = (config or PromptTemplateConfig()).vqa_template
    return template.replace("{class}", _checked_class(class_name))


# ---------------------------------------------------------------------------
# clients


class DescriptionClient:
    """Source of free-text descriptions for a prompt (and optional image)."""

    mode = "live"
    source = "llm"

    def query(
        self, prompt: str, image: str | Path | None = None, image_id: str | None = None
    ) -> list[str]:
        raise NotImplementedError


class FixtureClient(DescriptionClient):
    """Replays canned responses keyed by exact prompt text.

    Image queries first look up ``"<image_id>|<prompt>"`` and fall back to the
    bare prompt, so a fixture can hold either per-image or per-class answers.
    """

    mode = "fixture"

    def __init__(self, responses: Mapping[str, Sequence[str]], source: str = "fixture"):
        self.responses = {k: list(v) for k, v in responses.items()}
        self.source = source
        self.calls: list[str] = []

    @classmethod
    def from_file(cls, path: str | Path, source: str = "fixture") -> "FixtureClient":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise IOFailure(f"cannot read fixture file {path}: {exc}") from exc
        return cls(data, source=source)

    def query(self, prompt, image=None, image_id=None):
        self.calls.append(prompt)
        if image_id is not None and f"{image_id}|{prompt}" in self.responses:
            return list(self.responses[f"{image_id}|{prompt}"])
        if prompt in self.responses:
            return list(self.responses[prompt])
        raise ClientFailure(f"no fixture response for prompt {prompt!r}")


_LIST_MARKER = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def split_response(content: str) -> list[str]:
    """Split a free-text reply into one description per non-empty line."""
    lines = (_LIST_MARKER.sub("", line).strip() for line in content.splitlines())
    return [line for line in lines if line]


class ChatCompletionsClient(DescriptionClient):
    """Live client for an OpenAI-compatible ``/chat/completions`` endpoint.

    Images are sent inline as base64 data URLs, which is what hosted VQA
    models behind the same protocol accept.
    """

    mode = "live"

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        source: str = "llm",
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.model = model
        self.source = source
        self._http = httpx.Client(
            base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport
        )

    def query(self, prompt, image=None, image_id=None):
        content: list[dict] | str = prompt
        if image is not None:
            data = base64.b64encode(Path(image).read_bytes()).decode("ascii")
            content = [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{data}"}},
            ]
        payload = {"model": self.model, "messages": [{"role": "user", "content": content}]}
        try:
            resp = self._http.post("/chat/completions", json=payload)
            resp.raise_for_status()
            choices = resp.json()["choices"]
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise ClientFailure(f"description request failed: {exc}") from exc
        out = []
        for choice in choices:
            out.extend(split_response(choice["message"]["content"] or ""))
        return out


# ---------------------------------------------------------------------------
# collection


def _collect(client: DescriptionClient, prompt: str, count: int, retry_budget: int, **kw) -> list[str]:
    got: list[str] = []
    for attempt in range(retry_budget + 1):
        got.extend(t for t in client.query(prompt, **kw) if t and t.strip())
        if len(got) >= count:
            return got[:count]
        logger.info("got %d/%d descriptions (attempt %d)", len(got), count, attempt + 1)
        if client.mode == "fixture":
            # replaying the same fixture cannot produce more
            break
    raise InsufficientDescriptions(
        f"needed {count} descriptions for {prompt!r}, got {len(got)}"
    )


def collect_class_descriptions(
    client: DescriptionClient,
    class_name: str,
    n: int = 5,
    retry_budget: int = 2,
    config: PromptTemplateConfig | None = None,
) -> list[str]:
    if n < 1:
        raise InvalidConfig("n must be >= 1")
    prompt = render_class_prompt(class_name, config)
    return _collect(client, prompt, n, retry_budget)


def _check_image(image: str | Path) -> None:
    try:
        with Image.open(image) as im:
            im.verify()
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"cannot read image {image}: {exc}") from exc


def collect_image_descriptions(
    client: DescriptionClient,
    image: str | Path,
    class_name: str,
    m: int = 1,
    retry_budget: int = 2,
    config: PromptTemplateConfig | None = None,
    image_id: str | None = None,
) -> list[str]:
    if m < 0:
        raise InvalidConfig("m must be >= 0")
    if m == 0:
        return []
    _check_image(image)
    prompt = render_vqa_prompt(class_name, config)
    image_id = image_id if image_id is not None else Path(image).name
    return _collect(client, prompt, m, retry_budget, image=image, image_id=image_id)


def build_knowledge_base(
    llm_client: DescriptionClient,
    class_names: Iterable[str],
    config: PromptTemplateConfig | None = None,
    vqa_client: DescriptionClient | None = None,
    images: Iterable = (),
    max_workers: int = 4,
) -> KnowledgeBase:
    """Query the clients and assemble a knowledge base.

    ``images`` holds objects with ``class_name``, ``label``, ``image_path`` and
    ``image_id`` attributes (e.g. :class:`kanoclip.data.Sample`). Queries run
    concurrently; assembly is single-threaded in sorted class / image order.
    """
    config = config or PromptTemplateConfig()
    names = sorted({_checked_class(c) for c in class_names})
    selected = [
        s for s in images
        if s.class_name in names and (config.vqa_source == "all" or s.label == 1)
    ]
    selected.sort(key=lambda s: (s.class_name, s.image_id))
    if vqa_client is None or config.m_image_descriptions == 0:
        selected = []

    def llm_job(name):
        return collect_class_descriptions(
            llm_client, name, config.n_class_descriptions, config.retry_budget, config
        )

    def vqa_job(sample):
        return collect_image_descriptions(
            vqa_client, sample.image_path, sample.class_name, config.m_image_descriptions,
            config.retry_budget, config, image_id=sample.image_id,
        )

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        llm_results = list(pool.map(llm_job, names))
        vqa_results = list(pool.map(vqa_job, selected))

    kb = KnowledgeBase({name: ClassKnowledge() for name in names})
    llm_tag = "fixture" if llm_client.mode == "fixture" else "llm"
    for name, texts in zip(names, llm_results):
        kb.entries[name].llm = [Description(t, llm_tag) for t in texts]
    if selected:
        vqa_tag = "fixture" if vqa_client.mode == "fixture" else "vqa"
        for sample, texts in zip(selected, vqa_results):
            kb.entries[sample.class_name].vqa.extend(
                Description(t, vqa_tag, sample.image_id) for t in texts
            )
    return kb


def knowledge_mean(
    kb: KnowledgeBase, class_name: str, encode: Callable[[str], torch.Tensor]
) -> torch.Tensor:
    """Mean encoded description of a class (unnormalized)."""
    entry = kb[class_name]
    texts = entry.texts()
    if not texts:
        raise EmptyKnowledge(f"class {class_name!r} has no descriptions")
    total = None
    for text in texts:
        vec = torch.as_tensor(encode(text))
        total = vec if total is None else total + vec
    return total / len(texts)

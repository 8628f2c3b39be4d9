"""OpenAI-compatible vision chat-completions backend for the oracle.

The API key is read from an environment variable at request time and is
never stored on the config object, logged, or included in exceptions.
"""
from __future__ import annotations

import base64
import io
import logging
import os
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import requests
from PIL import Image

from .errors import LengthError, OracleUnavailable, ParseError, ValidationError
from .oracle import OracleQuery, OracleReply, parse_reply

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LlmConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o"
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 1.0
    backoff_factor: float = 2.0

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValidationError("timeout must be positive")
        if self.max_retries < 0:
            raise ValidationError("max_retries must be >= 0")
        if self.backoff_base < 0 or self.backoff_factor < 1:
            raise ValidationError("backoff needs base >= 0 and factor >= 1")


def png_data_url(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def request_body(cfg: LlmConfig, query: OracleQuery) -> dict:
    return {
        "model": cfg.model,
        "temperature": 0,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": query.prompt},
                {"type": "image_url", "image_url": {"url": png_data_url(query.image)}},
            ],
        }],
    }


def llm_query(cfg: LlmConfig, query: OracleQuery, sleep: Callable[[float], None] = time.sleep,
              session: requests.Session | None = None) -> OracleReply:
    """POST the query; retry transport and HTTP failures with exponential backoff.

    Raises OracleUnavailable once retries are exhausted. A reply that does
    not parse raises ParseError/LengthError carrying ``latency``.
    """
    if not query.prompt:
        raise ValidationError("prompt is empty")
    body = request_body(cfg, query)
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(cfg.api_key_env)
    if key:
        headers["Authorization"] = "Bearer " + key
    http = session or requests
    last = "no attempt made"
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            delay = cfg.backoff_base * cfg.backoff_factor ** (attempt - 1)
            log.info("oracle retry %d/%d in %.1f s", attempt, cfg.max_retries, delay)
            sleep(delay)
        t0 = time.monotonic()
        try:
            resp = http.post(cfg.endpoint, json=body, headers=headers, timeout=cfg.timeout)
        except requests.RequestException as exc:
            # exception text can embed request details; keep only the type
            last = type(exc).__name__
            log.warning("oracle request failed: %s", last)
            continue
        latency = time.monotonic() - t0
        if resp.status_code != 200:
            last = f"HTTP {resp.status_code}"
            log.warning("oracle request failed: %s", last)
            continue
        try:
            text = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            last = "malformed response body"
            log.warning("oracle request failed: %s", last)
            continue
        try:
            values = parse_reply(text, query.n_regions)
        except (ParseError, LengthError) as exc:
            exc.latency = latency
            raise
        return OracleReply(tuple(values), max(latency, 1e-9))
    raise OracleUnavailable(f"oracle unavailable after {cfg.max_retries + 1} attempts ({last})")


class LlmOracle:
    """Backend adapter; region voxels are not needed by the remote model."""

    def __init__(self, cfg: LlmConfig):
        self.cfg = cfg
        self.session = requests.Session()

    def __call__(self, query: OracleQuery, regions: Mapping[int, Sequence] | None = None) -> OracleReply:
        return llm_query(self.cfg, query, session=self.session)

"""JSON-over-HTTP with exponential backoff, shared by the chat and embedding clients."""

from __future__ import annotations

import logging
import time

import httpx

from .errors import GatewayError

logger = logging.getLogger(__name__)

RETRYABLE = {408, 409, 429, 500, 502, 503, 504}


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict,
    headers: dict | None = None,
    retries: int = 4,
    backoff: float = 1.0,
    counter: list | None = None,
) -> dict:
    """POST ``payload`` and return the decoded JSON body.

    Retries transport errors and the statuses in ``RETRYABLE`` up to
    ``retries`` times, sleeping ``backoff * 2**attempt`` seconds in between.
    ``counter``, when given, receives one entry per attempt.
    """
    last_status = None
    last_error = ""
    for attempt in range(retries + 1):
        if attempt:
            time.sleep(backoff * 2 ** (attempt - 1))
        if counter is not None:
            counter.append(url)
        try:
            resp = client.post(url, json=payload, headers=headers or {})
        except httpx.HTTPError as e:
            last_status, last_error = None, str(e)
            logger.warning("request to %s failed (%s), attempt %d", url, e, attempt + 1)
            continue
        if resp.status_code == 200:
            try:
                return resp.json()
            except ValueError as e:
                raise GatewayError(f"non-JSON response from {url}", resp.status_code) from e
        last_status, last_error = resp.status_code, resp.text[:200]
        if resp.status_code not in RETRYABLE:
            break
        logger.warning("%s returned %d, attempt %d", url, resp.status_code, attempt + 1)
    raise GatewayError(f"request to {url} failed: {last_error}", last_status)

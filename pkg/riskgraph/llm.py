"""HTTP client for LLM backends plus versioned prompt templates.

Requests are ``POST {model, system, user}`` as JSON.  Replies are JSON bodies
whose text is found in one of the common chat completion shapes.

"""
import hashlib
import importlib.resources
import logging
import os
import threading
import httpx
from .exceptions import BackendUnavailable


LOGGER = logging.getLogger("riskgraph")

API_KEY_ENV = "RISKGRAPH_LLM_API_KEY"
URL_ENV = "RISKGRAPH_LLM_URL"
MODEL_ENV = "RISKGRAPH_LLM_MODEL"

DEFAULT_TIMEOUT = 30.0


def load_prompt(name):
    """Return the text of a packaged prompt template."""
    return importlib.resources.files("riskgraph").joinpath(
        f"prompts/{name}.txt"
    ).read_text(encoding="utf-8")


def prompt_hash(name):
    """Return a short hash identifying a prompt template version."""
    text = load_prompt(name)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def extract_text(data):
    """Pull the reply text out of a JSON response body.

    Accepts {"text": ...}, {"output_text": ...}, {"content": "..."},
    {"content": [{"type": "text", "text": ...}]} and the
    {"choices": [{"message": {"content": ...}}]} chat completion shape.

    """
    if not isinstance(data, dict):
        return ""
    for key in ("text", "output_text"):
        if isinstance(data.get(key), str):
            return data[key]
    content = data.get("content")
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        return "".join(
            part.get("text", "") for part in content
            if isinstance(part, dict) and part.get("type") in ("text", None)
        )
    choices = data.get("choices")
    if isinstance(choices, list) and choices:
        message = choices[0].get("message") or {}
        return message.get("content") or ""
    return ""


def redact(text, secret):
    """Replace every occurrence of secret in text."""
    if not secret:
        return text
    return text.replace(secret, "***")


class LlmClient:
    """Synchronous JSON-over-HTTP LLM client that records transcripts."""

    def __init__(
            self,
            url,
            model,
            api_key,
            timeout=DEFAULT_TIMEOUT,
            transport=None):
        """Create the underlying httpx client."""
        # pylint: disable=too-many-arguments,too-many-positional-arguments
        self.url = url
        self.model = model
        self._api_key = api_key
        self._client = httpx.Client(
            timeout=timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {api_key}"},
        )
        self._lock = threading.Lock()
        self.transcripts = []

    @classmethod
    def from_env(cls, url=None, model=None, timeout=DEFAULT_TIMEOUT):
        """Build a client using the API key from the environment."""
        api_key = os.environ.get(API_KEY_ENV)
        if not api_key:
            raise BackendUnavailable(f"{API_KEY_ENV} is not set")
        url = url or os.environ.get(URL_ENV)
        if not url:
            raise BackendUnavailable(f"No endpoint URL, set {URL_ENV}")
        model = model or os.environ.get(MODEL_ENV, "default")
        return cls(url, model, api_key, timeout=timeout)

    def complete(self, system, user, prompt=None):
        """Send one request and return the reply text.

        prompt names the packaged template behind system; its hash is kept
        with the transcript.

        """
        body = {"model": self.model, "system": system, "user": user}
        LOGGER.debug("POST %s model=%s", self.url, self.model)
        try:
            response = self._client.post(self.url, json=body)
            response.raise_for_status()
            data = response.json()
        except httpx.HTTPError as err:
            raise BackendUnavailable(f"LLM request failed: {err}") from err
        except ValueError as err:
            raise BackendUnavailable(f"LLM reply is not JSON: {err}") from err
        text = extract_text(data)
        entry = {
            "request": {
                key: redact(value, self._api_key)
                for key, value in body.items()
            },
            "response": redact(text, self._api_key),
        }
        if prompt:
            entry["prompt"] = prompt_hash(prompt)
        with self._lock:
            self.transcripts.append(entry)
        return text

    def close(self):
        """Release the connection pool."""
        self._client.close()

    def __enter__(self):
        """Use as a context manager."""
        return self

    def __exit__(self, *exc):
        """Close on exit, also when the caller is interrupted."""
        self.close()

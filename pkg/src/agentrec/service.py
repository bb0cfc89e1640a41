"""HTTP service for the recommendation engine.

Corpora are held in an immutable map that admin operations replace wholesale
(rebuild-and-swap), so any number of concurrent recommend requests read a
consistent snapshot and never block on one another. The server reports ready
only after the corpus cache is fully loaded into memory.
"""

from __future__ import annotations

import threading
import time
from typing import Optional

import numpy as np
import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .config import EngineConfig
from .corpus import AgentCorpus, build_agent_corpora, load_corpus_cache, PromptRecord
from .embedding import EmbeddingProvider, build_provider
from .errors import AgentRecError, InvalidInputError, InvalidPromptError, StartupError
from .scoring import recommend

_CLIENT_ERROR_CODES = {
    "invalid_prompt",
    "invalid_input",
    "contract_violation",
    "invalid_configuration",
}


class RouterState:
    """Engine state shared by all requests; corpora swap atomically."""

    def __init__(self, config: EngineConfig, corpora: dict[str, AgentCorpus], provider: EmbeddingProvider):
        self.config = config
        self.provider = provider
        self._corpora = dict(corpora)
        self._admin_lock = threading.Lock()
        self._admin_counter = 0

    @property
    def corpora(self) -> dict[str, AgentCorpus]:
        # reference read is atomic; callers get a consistent snapshot
        return self._corpora

    def recommend(self, prompt: str, k: Optional[int]):
        snapshot = self._corpora
        if not snapshot:
            raise InvalidInputError("no corpora registered")
        effective_k = k if k is not None else self.config.default_k
        return recommend(
            prompt,
            snapshot,
            self.config.score,
            self.config.rephrase,
            self.provider,
            k=effective_k,
        )

    def add_prompts(self, agent: str, prompts: list[str]) -> int:
        """Re-embed the posted prompts and swap in a rebuilt corpus for the agent."""
        if not prompts:
            raise InvalidInputError("no prompts supplied")
        with self._admin_lock:
            records = []
            for text in prompts:
                self._admin_counter += 1
                records.append(PromptRecord(f"{agent}-admin-{self._admin_counter:06d}", agent, text))
            built = build_agent_corpora(records, self.provider)[agent]
            existing = self._corpora.get(agent)
            if existing is not None:
                merged = AgentCorpus(
                    agent,
                    np.vstack([existing.embeddings, built.embeddings]),
                    existing.prompt_ids + built.prompt_ids,
                )
            else:
                merged = built
            self._corpora = {**self._corpora, agent: merged}
            return merged.size

    def delete_agent(self, agent: str) -> bool:
        with self._admin_lock:
            if agent not in self._corpora:
                return False
            replacement = dict(self._corpora)
            del replacement[agent]
            self._corpora = replacement
            return True


class RecommendBody(BaseModel):
    prompt: str
    k: Optional[int] = Field(default=None, ge=1)


class CorpusPromptsBody(BaseModel):
    prompts: list[str]


def create_app(state: RouterState) -> FastAPI:
    app = FastAPI(title="agentrec", docs_url=None, redoc_url=None)

    @app.exception_handler(AgentRecError)
    async def _engine_error(_: Request, exc: AgentRecError):
        status = 400 if exc.code in _CLIENT_ERROR_CODES else 500
        return JSONResponse(status_code=status, content={"error": {"code": exc.code, "message": str(exc)}})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "agents": len(state.corpora)}

    @app.get("/v1/agents")
    def agents():
        snapshot = state.corpora
        return {
            "agents": [
                {"id": agent, "corpus_size": snapshot[agent].size} for agent in sorted(snapshot)
            ]
        }

    @app.post("/v1/recommend")
    def recommend_endpoint(body: RecommendBody):
        if not body.prompt.strip():
            raise InvalidPromptError("prompt is empty")
        start = time.perf_counter()
        result = state.recommend(body.prompt, body.k)
        elapsed_ms = (time.perf_counter() - start) * 1000.0
        payload = result.to_dict()
        return {
            "ranked": payload["ranked"],
            "rephrased": payload["rephrased"],
            "elapsed_ms": elapsed_ms,
        }

    @app.post("/v1/corpus/{agent}/prompts", status_code=202)
    def add_corpus_prompts(agent: str, body: CorpusPromptsBody):
        size = state.add_prompts(agent, body.prompts)
        return {"status": "accepted", "agent": agent, "corpus_size": size}

    @app.delete("/v1/corpus/{agent}")
    def delete_corpus(agent: str):
        if not state.delete_agent(agent):
            return JSONResponse(
                status_code=404,
                content={"error": {"code": "unknown_agent", "message": f"no corpus for {agent!r}"}},
            )
        return {"status": "deleted", "agent": agent}

    return app


def build_state(config: EngineConfig, corpora: dict[str, AgentCorpus] | None = None) -> RouterState:
    """Load corpora (from the cache file unless given inline) and build state."""
    if corpora is None:
        if not config.cache_path:
            raise StartupError("no cache_path configured and no corpora provided")
        corpora = load_corpus_cache(config.cache_path)
    provider = build_provider(config.provider)
    dims = {corpus.dim for corpus in corpora.values()}
    if dims and dims != {provider.dim}:
        raise StartupError(
            f"provider dim {provider.dim} does not match corpus dims {sorted(dims)}"
        )
    return RouterState(config, corpora, provider)


class ServiceHandle:
    """A running uvicorn server on its own thread."""

    def __init__(self, config: EngineConfig, state: RouterState):
        self._uv = uvicorn.Server(
            uvicorn.Config(
                create_app(state),
                host=config.host,
                port=config.port,
                log_level="warning",
            )
        )
        self._thread = threading.Thread(target=self._uv.run, daemon=True)
        self.state = state

    def start(self, timeout_s: float = 10.0) -> "ServiceHandle":
        self._thread.start()
        deadline = time.monotonic() + timeout_s
        while not self._uv.started:
            if not self._thread.is_alive():
                raise StartupError("server thread exited before startup completed")
            if time.monotonic() > deadline:
                self.stop()
                raise StartupError("server did not report started in time")
            time.sleep(0.01)
        return self

    @property
    def port(self) -> int:
        servers = getattr(self._uv, "servers", [])
        for server in servers:
            for sock in server.sockets:
                return sock.getsockname()[1]
        raise StartupError("server has no bound socket")

    def wait(self) -> None:
        self._thread.join()

    def stop(self) -> None:
        self._uv.should_exit = True
        self._thread.join(timeout=10.0)


def serve(config: EngineConfig, corpora: dict[str, AgentCorpus] | None = None) -> ServiceHandle:
    """Load corpora, bind, and return a handle once the service is ready."""
    state = build_state(config, corpora)
    return ServiceHandle(config, state).start()

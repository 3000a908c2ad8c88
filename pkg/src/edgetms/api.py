"""JSON-over-HTTP front end for a TwinStore.

Routes::

    GET   /twins                                  list twin ids
    GET   /twins/<site>/<node>                    twin document
    PUT   /twins/<site>/<node>                    create or replace
    PATCH /twins/<site>/<node>/properties/<path>  set one leaf (body: JSON scalar)
    GET   /twins/<site>/<node>/signatures?from=&to=&sources=&min_quality=&limit=&wr=

Errors come back as ``{"code": ..., "message": ...}`` with status 400, 404 or 409.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import asdict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, unquote, urlsplit

from .twins import SignatureQuery, TwinDocument, TwinError, TwinNotFound, TwinStore

log = logging.getLogger(__name__)

MAX_BODY = 1 << 20
_NO_UPPER_BOUND = 2**63 - 1


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


def _bad(message: str) -> ApiError:
    return ApiError(400, "bad_request", message)


def _split_route(path: str) -> tuple[str | None, str | None, str | None]:
    """-> (twin_id, action, rest); twin_id None means the collection."""
    parts = [unquote(p) for p in path.strip("/").split("/")]
    if parts == ["twins"]:
        return None, None, None
    if len(parts) < 3 or parts[0] != "twins":
        raise ApiError(404, "not_found", f"no route for {path}")
    twin_id = f"{parts[1]}/{parts[2]}"
    if len(parts) == 3:
        return twin_id, None, None
    action = parts[3]
    rest = "/".join(parts[4:]) or None
    if action == "signatures" and rest is None:
        return twin_id, action, None
    if action == "properties" and rest:
        return twin_id, action, rest
    raise ApiError(404, "not_found", f"no route for {path}")


def _int_param(qs: dict, name: str, default: int) -> int:
    raw = qs.get(name)
    if not raw:
        return default
    try:
        return int(raw[-1])
    except ValueError:
        raise _bad(f"{name} must be an integer") from None


def _float_param(qs: dict, name: str, default: float) -> float:
    raw = qs.get(name)
    if not raw:
        return default
    try:
        return float(raw[-1])
    except ValueError:
        raise _bad(f"{name} must be a number") from None


def parse_signature_query(twin_id: str, query: str) -> SignatureQuery:
    qs = parse_qs(query, keep_blank_values=False)
    unknown = set(qs) - {"from", "to", "sources", "min_quality", "limit", "wr"}
    if unknown:
        raise _bad(f"unknown query parameter(s): {', '.join(sorted(unknown))}")
    sources = None
    if qs.get("sources"):
        sources = frozenset(s for raw in qs["sources"] for s in raw.split(",") if s)
    try:
        return SignatureQuery(
            twin_id=twin_id,
            from_ms=_int_param(qs, "from", 0),
            to_ms=_int_param(qs, "to", _NO_UPPER_BOUND),
            sources=sources,
            min_quality=_float_param(qs, "min_quality", 0.0),
            max_results=_int_param(qs, "limit", 100),
            recency_weight=_float_param(qs, "wr", 0.5),
        )
    except ValueError as exc:
        raise _bad(str(exc)) from None


class TwinApiHandler(BaseHTTPRequestHandler):
    store: TwinStore  # set on the subclass made by make_server
    server_version = "edgetms-twins/1"

    def log_message(self, format: str, *args) -> None:  # noqa: A002 - stdlib signature
        log.debug("%s %s", self.address_string(), format % args)

    # -- plumbing ----------------------------------------------------------

    def _send(self, status: int, body: object) -> None:
        data = json.dumps(body, sort_keys=True).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _error(self, status: int, code: str, message: str) -> None:
        self._send(status, {"code": code, "message": message})

    def _body(self) -> object:
        try:
            length = int(self.headers.get("Content-Length") or 0)
        except ValueError:
            raise _bad("bad Content-Length") from None
        if length > MAX_BODY:
            raise ApiError(413, "too_large", "request body too large")
        raw = self.rfile.read(length) if length else b""
        try:
            return json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise _bad("request body must be JSON") from None

    def _handle(self, method: str) -> None:
        try:
            url = urlsplit(self.path)
            twin_id, action, rest = _split_route(url.path)
            status, body = self._route(method, twin_id, action, rest, url.query)
        except ApiError as exc:
            self._error(exc.status, exc.code, str(exc))
        except TwinError as exc:
            self._error(exc.status, exc.code, str(exc))
        except Exception:
            log.exception("unhandled error serving %s %s", method, self.path)
            self._error(500, "internal", "internal error")
        else:
            self._send(status, body)

    def _route(self, method, twin_id, action, rest, query) -> tuple[int, object]:
        store = self.store
        if twin_id is None:
            if method != "GET":
                raise ApiError(405, "method_not_allowed", f"{method} not allowed on /twins")
            return 200, store.list_twins()

        if action is None and method == "GET":
            return 200, store.get_twin(twin_id).to_dict()
        if action is None and method == "PUT":
            body = self._body()
            if not isinstance(body, dict):
                raise _bad("twin body must be a JSON object")
            if body.get("twin_id", twin_id) != twin_id:
                raise _bad("twin_id in body does not match URL")
            expected = body.get("expected_revision")
            if expected is not None and type(expected) is not int:
                raise _bad("expected_revision must be an integer")
            existed = store.has_twin(twin_id)
            doc = TwinDocument(twin_id, body.get("attributes") or {}, body.get("features") or {})
            rev = store.upsert_twin(doc, expected_revision=expected)
            return (200 if existed else 201), {"twin_id": twin_id, "revision": rev}
        if action == "properties" and method == "PATCH":
            value = self._body()
            if not store.has_twin(twin_id):
                raise TwinNotFound(twin_id)
            rev = store.set_property(twin_id, rest, value)
            return 200, {"twin_id": twin_id, "path": rest, "revision": rev}
        if action == "signatures" and method == "GET":
            if not store.has_twin(twin_id):
                raise TwinNotFound(twin_id)
            q = parse_signature_query(twin_id, query)
            return 200, [asdict(r) for r in store.select_signatures(q)]
        raise ApiError(405, "method_not_allowed", f"{method} not allowed here")

    def do_GET(self) -> None:
        self._handle("GET")

    def do_PUT(self) -> None:
        self._handle("PUT")

    def do_PATCH(self) -> None:
        self._handle("PATCH")

    def do_POST(self) -> None:
        self._handle("POST")

    def do_DELETE(self) -> None:
        self._handle("DELETE")


def make_server(store: TwinStore, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("BoundTwinApiHandler", (TwinApiHandler,), {"store": store})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


class TwinApiServer:
    """Runs the API on a background thread; use as a context manager."""

    def __init__(self, store: TwinStore, host: str = "127.0.0.1", port: int = 0):
        self.httpd = make_server(store, host, port)
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="twin-api", daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        host, port = self.httpd.server_address[:2]
        return host, port

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> TwinApiServer:
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> TwinApiServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


__all__ = ["ApiError", "TwinApiServer", "make_server", "parse_signature_query"]

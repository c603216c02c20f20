"""ssl.SSLContext construction from in-memory CA material."""

from __future__ import annotations

import os
import ssl
import tempfile

from .ca import CertAuthority, HostCredential


def _load_chain(ctx: ssl.SSLContext, cred: HostCredential) -> None:
    # ssl only loads cert chains from files
    fd, path = tempfile.mkstemp(prefix="tpcbench-", suffix=".pem")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(cred.certificate)
            fh.write(b"\n")
            fh.write(cred.private_key)
        ctx.load_cert_chain(path)
    finally:
        os.unlink(path)


def server_context(
    credential: HostCredential, trust: CertAuthority | None, require_client_cert: bool = False
) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    _load_chain(ctx, credential)
    if trust is not None:
        ctx.load_verify_locations(cadata=trust.certificate.decode("ascii"))
    if require_client_cert:
        if trust is None:
            raise ValueError("mutual TLS needs a trust root")
        ctx.verify_mode = ssl.CERT_REQUIRED
    return ctx


def client_context(
    trust: CertAuthority | None, credential: HostCredential | None = None
) -> ssl.SSLContext:
    """Client context verifying peers against ``trust`` (system store if None)."""
    if trust is None:
        ctx = ssl.create_default_context()
    else:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        ctx.load_verify_locations(cadata=trust.certificate.decode("ascii"))
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    if credential is not None:
        _load_chain(ctx, credential)
    return ctx

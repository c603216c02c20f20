"""Throwaway certificate authority for endpoint TLS.

Every endpoint in a benchmark mesh gets a credential issued by one test CA so
that transfers run over mutually verifiable TLS. Keys are P-256 ECDSA.
"""

from __future__ import annotations

import datetime as dt
import ipaddress
import os
from dataclasses import dataclass, field
from pathlib import Path

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

__all__ = [
    "CertAuthority",
    "CertificateError",
    "CredentialParseError",
    "HostCredential",
    "create_authority",
    "export_authority",
    "export_credential",
    "issue_host_credential",
    "load_authority",
    "load_credential",
    "load_trust",
    "verify_chain",
]


class CertificateError(ValueError):
    """Invalid input to a CA operation."""


class CredentialParseError(CertificateError):
    """PEM material could not be parsed."""


@dataclass(frozen=True)
class CertAuthority:
    subject_name: str
    certificate: bytes
    private_key: bytes = field(repr=False)
    validity: int

    @property
    def cert(self) -> x509.Certificate:
        return x509.load_pem_x509_certificate(self.certificate)


@dataclass(frozen=True)
class HostCredential:
    hostnames: tuple[str, ...]
    certificate: bytes
    private_key: bytes = field(repr=False)
    issuer: str

    @property
    def cert(self) -> x509.Certificate:
        return x509.load_pem_x509_certificate(self.certificate)


def _now() -> dt.datetime:
    return dt.datetime.now(dt.timezone.utc)


def _parse_name(subject_name: str) -> x509.Name:
    if not isinstance(subject_name, str) or not subject_name.strip():
        raise CertificateError("subject name must be a nonempty string")
    text = subject_name.strip()
    if "=" in text:
        try:
            name = x509.Name.from_rfc4514_string(text)
        except ValueError as exc:
            raise CertificateError(f"invalid distinguished name {text!r}: {exc}") from exc
        if not list(name):
            raise CertificateError(f"invalid distinguished name {text!r}")
        return name
    try:
        return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, text)])
    except ValueError as exc:
        raise CertificateError(f"invalid common name {text!r}: {exc}") from exc


def _new_key() -> ec.EllipticCurvePrivateKey:
    return ec.generate_private_key(ec.SECP256R1())


def _key_pem(key: ec.EllipticCurvePrivateKey) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


def _check_days(validity_days: int) -> None:
    if isinstance(validity_days, bool) or not isinstance(validity_days, int):
        raise CertificateError("validity_days must be an integer")
    if validity_days < 1:
        raise CertificateError(f"validity_days must be >= 1, got {validity_days}")


def create_authority(subject_name: str, validity_days: int = 365) -> CertAuthority:
    """Create a self-signed CA certificate and key.

    ``subject_name`` is either an RFC 4514 string (``CN=x,O=y``) or a bare
    common name. Nothing is written to disk; see :func:`export_authority`.
    """
    _check_days(validity_days)
    name = _parse_name(subject_name)
    key = _new_key()
    now = _now()
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - dt.timedelta(minutes=5))
        .not_valid_after(now + dt.timedelta(days=validity_days))
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=True,
                content_commitment=False,
                key_encipherment=False,
                data_encipherment=False,
                key_agreement=False,
                key_cert_sign=True,
                crl_sign=True,
                encipher_only=False,
                decipher_only=False,
            ),
            critical=True,
        )
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
        .sign(key, hashes.SHA256())
    )
    return CertAuthority(
        subject_name=name.rfc4514_string(),
        certificate=cert.public_bytes(serialization.Encoding.PEM),
        private_key=_key_pem(key),
        validity=validity_days,
    )


def _san_entry(hostname: str) -> x509.GeneralName:
    try:
        return x509.IPAddress(ipaddress.ip_address(hostname))
    except ValueError:
        pass
    try:
        return x509.DNSName(hostname)
    except ValueError as exc:
        raise CertificateError(f"invalid hostname {hostname!r}") from exc


def issue_host_credential(
    ca: CertAuthority, hostnames: list[str], validity_days: int = 30
) -> HostCredential:
    """Issue a server+client credential for ``hostnames`` signed by ``ca``."""
    hostnames = [h for h in hostnames]
    if not hostnames:
        raise CertificateError("at least one hostname is required")
    if any(not isinstance(h, str) or not h for h in hostnames):
        raise CertificateError("hostnames must be nonempty strings")
    _check_days(validity_days)
    ca_cert = _load_cert(ca.certificate)
    ca_key = serialization.load_pem_private_key(ca.private_key, password=None)
    now = _now()
    if ca_cert.not_valid_after_utc <= now:
        raise CertificateError(f"CA {ca.subject_name!r} expired at {ca_cert.not_valid_after_utc}")
    key = _new_key()
    not_after = min(now + dt.timedelta(days=validity_days), ca_cert.not_valid_after_utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, hostnames[0])]))
        .issuer_name(ca_cert.subject)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - dt.timedelta(minutes=5))
        .not_valid_after(not_after)
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .add_extension(
            x509.SubjectAlternativeName([_san_entry(h) for h in hostnames]), critical=False
        )
        .add_extension(
            x509.ExtendedKeyUsage(
                [ExtendedKeyUsageOID.SERVER_AUTH, ExtendedKeyUsageOID.CLIENT_AUTH]
            ),
            critical=False,
        )
        .add_extension(
            x509.AuthorityKeyIdentifier.from_issuer_public_key(ca_cert.public_key()),
            critical=False,
        )
        .sign(ca_key, hashes.SHA256())
    )
    return HostCredential(
        hostnames=tuple(hostnames),
        certificate=cert.public_bytes(serialization.Encoding.PEM),
        private_key=_key_pem(key),
        issuer=ca.subject_name,
    )


def _load_cert(pem: bytes | str) -> x509.Certificate:
    if isinstance(pem, str):
        pem = pem.encode()
    try:
        return x509.load_pem_x509_certificate(pem)
    except (ValueError, TypeError) as exc:
        raise CredentialParseError(f"malformed PEM certificate: {exc}") from exc


def san_hostnames(cert: x509.Certificate) -> list[str]:
    try:
        san = cert.extensions.get_extension_for_class(x509.SubjectAlternativeName).value
    except x509.ExtensionNotFound:
        return []
    names: list[str] = []
    for entry in san:
        if isinstance(entry, x509.IPAddress):
            names.append(str(entry.value))
        elif isinstance(entry, x509.DNSName):
            names.append(entry.value)
    return names


def verify_chain(cred: HostCredential | bytes | str, ca: CertAuthority) -> bool:
    """True iff ``cred`` was signed by ``ca`` and both are currently valid.

    Accepts a credential or raw PEM. Unparseable input raises
    :class:`CredentialParseError` rather than returning False.
    """
    pem = cred.certificate if isinstance(cred, HostCredential) else cred
    leaf = _load_cert(pem)
    root = _load_cert(ca.certificate)
    if leaf.issuer != root.subject:
        return False
    try:
        leaf.verify_directly_issued_by(root)
    except (InvalidSignature, ValueError, TypeError):
        return False
    now = _now()
    for c in (leaf, root):
        if not (c.not_valid_before_utc <= now <= c.not_valid_after_utc):
            return False
    return True


def _write(path: Path, data: bytes, mode: int) -> None:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, mode)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.chmod(path, mode)


def export_authority(ca: CertAuthority, directory: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``ca.crt`` and ``ca.key`` (0600) into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    crt, key = out / "ca.crt", out / "ca.key"
    _write(crt, ca.certificate, 0o644)
    _write(key, ca.private_key, 0o600)
    return crt, key


def load_authority(directory: str | os.PathLike) -> CertAuthority:
    src = Path(directory)
    pem = (src / "ca.crt").read_bytes()
    key = (src / "ca.key").read_bytes()
    cert = _load_cert(pem)
    days = (cert.not_valid_after_utc - cert.not_valid_before_utc - dt.timedelta(minutes=5)).days
    return CertAuthority(cert.subject.rfc4514_string(), pem, key, max(days, 1))


def load_trust(ca_file: str | os.PathLike) -> CertAuthority:
    """Trust root from a certificate alone; it cannot issue credentials."""
    pem = Path(ca_file).read_bytes()
    cert = _load_cert(pem)
    days = max((cert.not_valid_after_utc - cert.not_valid_before_utc).days, 1)
    return CertAuthority(cert.subject.rfc4514_string(), pem, b"", days)


def export_credential(
    cred: HostCredential, directory: str | os.PathLike, name: str | None = None
) -> tuple[Path, Path]:
    """Write ``<name>.crt`` and ``<name>.key``; name defaults to the first hostname."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    stem = name or cred.hostnames[0]
    crt, key = out / f"{stem}.crt", out / f"{stem}.key"
    _write(crt, cred.certificate, 0o644)
    _write(key, cred.private_key, 0o600)
    return crt, key


def load_credential(cert_file: str | os.PathLike, key_file: str | os.PathLike) -> HostCredential:
    pem = Path(cert_file).read_bytes()
    key = Path(key_file).read_bytes()
    cert = _load_cert(pem)
    return HostCredential(
        hostnames=tuple(san_hostnames(cert)),
        certificate=pem,
        private_key=key,
        issuer=cert.issuer.rfc4514_string(),
    )

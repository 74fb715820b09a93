"""Code capabilities: certificate-chain capabilities with embedded rights functions."""

from .certchain import (
    Certificate,
    Heritage,
    KeyPair,
    RequestCert,
    ValidationReport,
    canonical_encode,
    decode_heritage,
    encode_heritage,
    generate_keypair,
    sign_certificate,
    validate_heritage,
    verify_certificate,
)
from .codecap import (
    Codecap,
    Decision,
    amplify,
    authorize,
    confine,
    delegate,
    mint_root,
    sign_request,
)
from .directory import (
    ClientDirState,
    DirectoryTable,
    chdir,
    dir_chmod,
    dir_insert,
    dir_list,
    dir_lookup,
    dir_remove,
    resolve_path,
)
from .objectsvc import ObjectService, PrimaryLink, ServiceConfig, SweepReport
from .rights import EvalContext, EvalOutcome, builtin_table, evaluate, parse_program
from .wire import (
    LoopbackEndpoint,
    Network,
    Server,
    TcpEndpoint,
    client_call,
    encode_auth_header,
    parse_auth_header,
    serve,
)

__version__ = "0.1.0"

__all__ = [
    "Certificate",
    "Heritage",
    "KeyPair",
    "RequestCert",
    "ValidationReport",
    "canonical_encode",
    "decode_heritage",
    "encode_heritage",
    "generate_keypair",
    "sign_certificate",
    "validate_heritage",
    "verify_certificate",
    "Codecap",
    "Decision",
    "amplify",
    "authorize",
    "confine",
    "delegate",
    "mint_root",
    "sign_request",
    "ClientDirState",
    "DirectoryTable",
    "chdir",
    "dir_chmod",
    "dir_insert",
    "dir_list",
    "dir_lookup",
    "dir_remove",
    "resolve_path",
    "LoopbackEndpoint",
    "Network",
    "Server",
    "TcpEndpoint",
    "client_call",
    "encode_auth_header",
    "parse_auth_header",
    "serve",
    "ObjectService",
    "PrimaryLink",
    "ServiceConfig",
    "SweepReport",
    "EvalContext",
    "EvalOutcome",
    "builtin_table",
    "evaluate",
    "parse_program",
]

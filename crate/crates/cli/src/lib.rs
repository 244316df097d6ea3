//! Subcommands of the `pointfuse` binary and the fast self-test suite.

pub mod commands;
pub mod selftest;

use pointfuse::Error;

/// Process exit code for a failed command: 2 for usage and configuration
/// problems (including missing input files), 1 for everything else.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        e if e.is_usage() => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

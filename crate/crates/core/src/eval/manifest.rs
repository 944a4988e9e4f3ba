//! JSON-lines utterance manifests.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Speaker role: controller, pilot or recorded terminal information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    C,
    P,
    A,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::C, Role::P, Role::A];
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::C => "C",
            Role::P => "P",
            Role::A => "A",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "C" | "c" => Ok(Role::C),
            "P" | "p" => Ok(Role::P),
            "A" | "a" => Ok(Role::A),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// WAV path; relative paths resolve against the manifest's directory.
    pub audio: PathBuf,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

pub fn read_manifest<R: BufRead>(r: R, base: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(&line).map_err(|err| ManifestError::Parse {
            line: i + 1,
            msg: err.to_string(),
        })?;
        if e.audio.is_relative() {
            e.audio = base.join(&e.audio);
        }
        out.push(e);
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, ManifestError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(std::io::BufReader::new(std::fs::File::open(path)?), base)
}

pub fn write_manifest<W: Write>(mut w: W, entries: &[ManifestEntry]) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_relative_paths() {
        let e = ManifestEntry {
            utt_id: "u1".into(),
            audio: "wav/u1.wav".into(),
            text: "hello".into(),
            role: Some(Role::P),
            duration_s: Some(1.5),
        };
        let mut buf = Vec::new();
        write_manifest(&mut buf, std::slice::from_ref(&e)).unwrap();
        let back = read_manifest(&buf[..], Path::new("/data")).unwrap();
        assert_eq!(back[0].audio, Path::new("/data/wav/u1.wav"));
        assert_eq!(back[0].role, Some(Role::P));
        let no_role = br#"{"utt_id":"x","audio":"/a.wav","text":"t"}"#;
        assert_eq!(read_manifest(&no_role[..], Path::new(".")).unwrap()[0].role, None);
        assert!(matches!(read_manifest(&b"{oops\n"[..], Path::new(".")), Err(ManifestError::Parse { line: 1, .. })));
    }
}

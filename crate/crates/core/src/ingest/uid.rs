use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{IngestError, ParseError};

/// Hex length of a digest produced by [`hash_uid`].
pub const UID_HEX_LEN: usize = 64;

/// A device identity after one-way hashing.
///
/// Cloning is cheap; the text is shared.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UidHash(Arc<str>);

impl UidHash {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Accept an identifier that was hashed upstream. Only lowercase hex is
    /// allowed, which keeps raw device ids from slipping through unhashed.
    pub fn from_digest(text: &str) -> Result<Self, IngestError> {
        if is_digest_like(text) {
            Ok(UidHash(Arc::from(text)))
        } else {
            Err(IngestError::BadUid(text.chars().take(80).collect()))
        }
    }
}

fn is_digest_like(text: &str) -> bool {
    !text.is_empty()
        && text.len() <= 128
        && text.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

impl fmt::Debug for UidHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "UidHash({})", self.0)
    }
}

impl fmt::Display for UidHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for UidHash {
    type Error = IngestError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        UidHash::from_digest(&s)
    }
}

impl From<UidHash> for String {
    fn from(u: UidHash) -> String {
        u.0.to_string()
    }
}

/// SHA-256 over `salt ‖ raw_id`, hex encoded.
///
/// Both datasets must be ingested with the same salt for their users to join.
pub fn hash_uid(raw_id: &str, salt: &str) -> Result<UidHash, IngestError> {
    if raw_id.is_empty() {
        return Err(IngestError::EmptyRawId);
    }
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(raw_id.as_bytes());
    Ok(UidHash(Arc::from(hex::encode(h.finalize()))))
}

/// How the `uid` column of an input file is interpreted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UidMode {
    /// Column already holds a hashed identifier.
    Verbatim,
    /// Column holds raw device ids; hash them with this salt.
    Salted(String),
}

/// Resolves uid column text to shared [`UidHash`] values, hashing each
/// distinct raw id once.
#[derive(Debug)]
pub struct UidInterner {
    mode: UidMode,
    seen: HashMap<Box<str>, UidHash>,
}

impl UidInterner {
    pub fn new(mode: UidMode) -> Self {
        UidInterner {
            mode,
            seen: HashMap::new(),
        }
    }

    pub fn resolve(&mut self, text: &str) -> Result<UidHash, ParseError> {
        if let Some(u) = self.seen.get(text) {
            return Ok(u.clone());
        }
        let uid = match &self.mode {
            UidMode::Verbatim => UidHash::from_digest(text).map_err(|_| ParseError::BadUid)?,
            UidMode::Salted(salt) => hash_uid(text, salt).map_err(|_| ParseError::BadUid)?,
        };
        self.seen.insert(text.into(), uid.clone());
        Ok(uid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_salted() {
        let a = hash_uid("phoneA", "s1").unwrap();
        assert_eq!(a, hash_uid("phoneA", "s1").unwrap());
        assert_ne!(a, hash_uid("phoneA", "s2").unwrap());
        assert_eq!(a.as_str().len(), UID_HEX_LEN);
    }

    #[test]
    fn published_sha256_vectors() {
        // FIPS 180-2 test vectors; an empty salt reduces the keyed digest to plain SHA-256
        assert_eq!(
            hash_uid("abc", "").unwrap().as_str(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            hash_uid("bc", "a").unwrap().as_str(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            hash_uid("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq", "")
                .unwrap()
                .as_str(),
            "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1"
        );
    }

    #[test]
    fn empty_raw_id_rejected() {
        assert!(matches!(hash_uid("", "salt"), Err(IngestError::EmptyRawId)));
    }

    #[test]
    fn verbatim_requires_hex() {
        assert!(UidHash::from_digest("a1b2").is_ok());
        assert!(UidHash::from_digest("phoneA").is_err());
        assert!(UidHash::from_digest("").is_err());
        let mut raw = UidInterner::new(UidMode::Verbatim);
        assert!(raw.resolve("john.doe").is_err());
        let mut salted = UidInterner::new(UidMode::Salted("k".into()));
        let u = salted.resolve("john.doe").unwrap();
        assert_eq!(u, hash_uid("john.doe", "k").unwrap());
        // interned values share storage
        let again = salted.resolve("john.doe").unwrap();
        assert!(Arc::ptr_eq(&u.0, &again.0));
    }

    #[test]
    fn serde_uses_plain_string() {
        let u = UidHash::from_digest("abc123").unwrap();
        let json = serde_json::to_string(&u).unwrap();
        assert_eq!(json, "\"abc123\"");
        let back: UidHash = serde_json::from_str(&json).unwrap();
        assert_eq!(back, u);
        assert!(serde_json::from_str::<UidHash>("\"NOPE\"").is_err());
    }
}

//! Key management and the encryption envelope.
//!
//! The data key is Shamir-shared across replicas: shares are evaluations of
//! degree-`t` polynomials over the Mersenne prime field GF(2^61 - 1), with
//! key bytes packed seven to a field element. Any `t + 1` shares
//! interpolate the key; `t` or fewer reveal nothing.
//!
//! All client/server payloads travel inside an authenticated envelope
//! padded to a size class, so wire lengths depend only on message kind and
//! server-visible metadata, never on which block an access touches. The
//! cipher is a SHA-256-based stream with an encrypt-then-MAC tag; the
//! envelope is simulation plumbing, not a hardened AEAD.

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Field modulus 2^61 - 1.
const P: u128 = (1 << 61) - 1;
/// Key bytes packed per field element; 2^56 < P.
const PACK: usize = 7;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SecretsError {
    #[error("need more than t = {t} shares to split a key across {n}")]
    BadThreshold { n: usize, t: usize },
    #[error("too few shares: got {got}, need {need}")]
    TooFewShares { got: usize, need: usize },
    #[error("duplicate share index {0}")]
    DuplicateIndex(u64),
    #[error("share {index} malformed: {reason}")]
    MalformedShare { index: u64, reason: &'static str },
    #[error("shares mutually inconsistent; offending indices {offending:?}")]
    Inconsistent { offending: Vec<u64> },
    #[error("ambiguous reconstruction: {candidates} candidate keys each consistent with {count} shares")]
    Ambiguous { candidates: usize, count: usize },
    #[error("envelope authentication failed")]
    AuthFailure,
    #[error("envelope malformed: {0}")]
    MalformedEnvelope(&'static str),
    #[error("plaintext of {len} bytes exceeds size class {class}")]
    ClassOverflow { len: usize, class: usize },
}

fn add(a: u64, b: u64) -> u64 {
    (((a as u128) + (b as u128)) % P) as u64
}

fn sub(a: u64, b: u64) -> u64 {
    (((a as u128) + P - (b as u128)) % P) as u64
}

fn mul(a: u64, b: u64) -> u64 {
    (((a as u128) * (b as u128)) % P) as u64
}

fn pow(mut base: u64, mut exp: u128) -> u64 {
    let mut acc = 1u64;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul(acc, base);
        }
        base = mul(base, base);
        exp >>= 1;
    }
    acc
}

fn inv(a: u64) -> u64 {
    debug_assert!(a != 0);
    pow(a, P - 2)
}

/// One replica's share of the data key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyShare {
    /// Evaluation point; replica `i` holds `x = i + 1`.
    pub index: u64,
    /// One field element per 7-byte chunk of the key.
    pub words: Vec<u64>,
    /// Original key length in bytes.
    pub key_len: u32,
}

impl KeyShare {
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.words.len() * 8);
        out.extend_from_slice(&self.index.to_le_bytes());
        out.extend_from_slice(&self.key_len.to_le_bytes());
        out.extend_from_slice(&(self.words.len() as u32).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Parses a wire share, rejecting values outside the field.
    pub fn from_wire(bytes: &[u8]) -> Result<Self, SecretsError> {
        let malformed = |reason| SecretsError::MalformedShare { index: 0, reason };
        if bytes.len() < 16 {
            return Err(malformed("short header"));
        }
        let index = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let key_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + count * 8 {
            return Err(SecretsError::MalformedShare {
                index,
                reason: "length mismatch",
            });
        }
        let mut words = Vec::with_capacity(count);
        for i in 0..count {
            let w = u64::from_le_bytes(bytes[16 + i * 8..24 + i * 8].try_into().unwrap());
            if (w as u128) >= P {
                return Err(SecretsError::MalformedShare {
                    index,
                    reason: "word outside field",
                });
            }
            words.push(w);
        }
        Ok(KeyShare {
            index,
            words,
            key_len,
        })
    }
}

fn pack_key(key: &[u8]) -> Vec<u64> {
    key.chunks(PACK)
        .map(|chunk| {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            u64::from_le_bytes(buf)
        })
        .collect()
}

fn unpack_key(words: &[u64], key_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(key_len);
    for w in words {
        out.extend_from_slice(&w.to_le_bytes()[..PACK]);
    }
    out.truncate(key_len);
    out
}

/// Splits `key` into `n` shares with threshold `t`: any `t + 1` shares
/// reconstruct it, `t` reveal nothing.
pub fn share_key<R: Rng + ?Sized>(
    key: &[u8],
    n: usize,
    t: usize,
    rng: &mut R,
) -> Result<Vec<KeyShare>, SecretsError> {
    if n <= t {
        return Err(SecretsError::BadThreshold { n, t });
    }
    let secrets = pack_key(key);
    // One polynomial per chunk: coeffs[0] is the secret.
    let polys: Vec<Vec<u64>> = secrets
        .iter()
        .map(|&s| {
            let mut coeffs = vec![s];
            for _ in 0..t {
                coeffs.push(rng.gen_range(0..P as u64));
            }
            coeffs
        })
        .collect();
    Ok((1..=n as u64)
        .map(|x| KeyShare {
            index: x,
            words: polys.iter().map(|c| eval_poly(c, x)).collect(),
            key_len: key.len() as u32,
        })
        .collect())
}

fn eval_poly(coeffs: &[u64], x: u64) -> u64 {
    let mut acc = 0u64;
    for &c in coeffs.iter().rev() {
        acc = add(mul(acc, x), c);
    }
    acc
}

/// Lagrange interpolation of the polynomial through `points` at `x`.
fn lagrange_at(points: &[(u64, u64)], x: u64) -> u64 {
    let mut acc = 0u64;
    for (i, &(xi, yi)) in points.iter().enumerate() {
        let mut num = 1u64;
        let mut den = 1u64;
        for (j, &(xj, _)) in points.iter().enumerate() {
            if i != j {
                num = mul(num, sub(x, xj) % P as u64);
                den = mul(den, sub(xi, xj));
            }
        }
        acc = add(acc, mul(yi, mul(num, inv(den))));
    }
    acc
}

fn interpolate_key(shares: &[&KeyShare], chunks: usize, key_len: usize) -> Vec<u8> {
    let words: Vec<u64> = (0..chunks)
        .map(|c| {
            let points: Vec<(u64, u64)> =
                shares.iter().map(|s| (s.index, s.words[c])).collect();
            lagrange_at(&points, 0)
        })
        .collect();
    unpack_key(&words, key_len)
}

/// Whether `share` lies on the polynomials defined by `basis` (a set of
/// `t + 1` shares), chunk by chunk.
fn consistent_with(basis: &[&KeyShare], share: &KeyShare) -> bool {
    (0..share.words.len()).all(|c| {
        let points: Vec<(u64, u64)> = basis.iter().map(|s| (s.index, s.words[c])).collect();
        lagrange_at(&points, share.index) == share.words[c]
    })
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Recovers the key from at least `t + 1` shares.
///
/// With exactly `t + 1` shares this is plain interpolation. With more, the
/// shares are cross-checked: if all agree, the interpolated key is
/// returned; otherwise every `(t + 1)`-subset is tried and a candidate is
/// accepted only when it is the unique one consistent with at least
/// `2t + 1` shares. A wrong polynomial can agree with at most `t` honest
/// and `t` corrupted shares, so the quorum can only be reached by the true
/// key whenever at least `2t + 1` honest shares are present (which the
/// reply quorum guarantees). With fewer honest shares reconstruction can
/// be provably ambiguous, and the error says so rather than guessing.
pub fn reconstruct_key(shares: &[KeyShare], t: usize) -> Result<Vec<u8>, SecretsError> {
    if shares.len() < t + 1 {
        return Err(SecretsError::TooFewShares {
            got: shares.len(),
            need: t + 1,
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in shares {
        if s.index == 0 {
            return Err(SecretsError::MalformedShare {
                index: 0,
                reason: "index must be nonzero",
            });
        }
        if !seen.insert(s.index) {
            return Err(SecretsError::DuplicateIndex(s.index));
        }
    }
    let chunks = shares[0].words.len();
    let key_len = shares[0].key_len as usize;
    for s in shares {
        if s.words.len() != chunks || s.key_len as usize != key_len {
            return Err(SecretsError::MalformedShare {
                index: s.index,
                reason: "shape mismatch",
            });
        }
    }

    // Fast path: first t + 1 shares, everyone else consistent.
    let basis: Vec<&KeyShare> = shares.iter().take(t + 1).collect();
    if shares.iter().skip(t + 1).all(|s| consistent_with(&basis, s)) {
        return Ok(interpolate_key(&basis, chunks, key_len));
    }

    // Voting: the honest quorum is 2t + 1 consistent shares; no wrong
    // polynomial can reach it while at most t shares are corrupted.
    let need = 2 * t + 1;
    let mut winners: Vec<(Vec<u8>, Vec<u64>, usize)> = Vec::new();
    for subset in subsets(shares.len(), t + 1) {
        let basis: Vec<&KeyShare> = subset.iter().map(|&i| &shares[i]).collect();
        let mut offending = Vec::new();
        let mut count = 0usize;
        for s in shares {
            if consistent_with(&basis, s) {
                count += 1;
            } else {
                offending.push(s.index);
            }
        }
        if count >= need {
            let key = interpolate_key(&basis, chunks, key_len);
            if !winners.iter().any(|(k, _, _)| *k == key) {
                winners.push((key, offending, count));
            }
        }
    }
    match winners.len() {
        1 => Ok(winners.remove(0).0),
        0 => {
            // Nothing reaches quorum: name the shares off the best basis.
            let basis: Vec<&KeyShare> = shares.iter().take(t + 1).collect();
            let offending = shares
                .iter()
                .filter(|s| !consistent_with(&basis, s))
                .map(|s| s.index)
                .collect();
            Err(SecretsError::Inconsistent { offending })
        }
        n => Err(SecretsError::Ambiguous {
            candidates: n,
            count: winners[0].2,
        }),
    }
}

/// Deterministic, equality-comparable tag for an address under a key. Used
/// by the strong-mode access registry: the server stores and returns tags,
/// clients count how many concurrent accesses target the same address.
pub fn addr_tag(key: &[u8], addr: u32) -> [u8; 16] {
    let mut h = Sha256::new();
    h.update(b"mvoram.addr");
    h.update(key);
    h.update(addr.to_le_bytes());
    let d = h.finalize();
    d[..16].try_into().unwrap()
}

/// Message kinds with distinct padding policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgKind {
    GetPmRequest = 1,
    GetPsRequest = 2,
    EvictRequest = 3,
    GetPmReply = 4,
    GetPsReply = 5,
    EvictReply = 6,
}

impl MsgKind {
    fn from_u8(v: u8) -> Option<MsgKind> {
        Some(match v {
            1 => MsgKind::GetPmRequest,
            2 => MsgKind::GetPsRequest,
            3 => MsgKind::EvictRequest,
            4 => MsgKind::GetPmReply,
            5 => MsgKind::GetPsReply,
            6 => MsgKind::EvictReply,
            _ => return None,
        })
    }
}

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
/// kind byte + nonce + padded-length field + tag.
pub const ENVELOPE_OVERHEAD: usize = 1 + NONCE_LEN + 4 + TAG_LEN;

/// Smallest power-of-two size class holding `payload_len` plus its length
/// frame, with a per-kind floor.
pub fn pow2_class(payload_len: usize, min: usize) -> usize {
    (payload_len + 4).max(min).next_power_of_two()
}

fn derive(key: &[u8], label: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(label);
    h.update(key);
    h.finalize().into()
}

fn keystream_xor(key: &[u8; 32], nonce: &[u8; NONCE_LEN], data: &mut [u8]) {
    let mut counter = 0u64;
    for chunk in data.chunks_mut(32) {
        let mut h = Sha256::new();
        h.update(key);
        h.update(nonce);
        h.update(counter.to_le_bytes());
        let block = h.finalize();
        for (b, k) in chunk.iter_mut().zip(block.iter()) {
            *b ^= k;
        }
        counter += 1;
    }
}

fn tag_for(key: &[u8; 32], kind: u8, nonce: &[u8; NONCE_LEN], ciphertext: &[u8]) -> [u8; TAG_LEN] {
    let mut h = Sha256::new();
    h.update(key);
    h.update([kind]);
    h.update(nonce);
    h.update((ciphertext.len() as u64).to_le_bytes());
    h.update(ciphertext);
    let d = h.finalize();
    d[..TAG_LEN].try_into().unwrap()
}

/// Seals `plaintext` into an envelope padded to `class_len` bytes of
/// ciphertext. Wire layout: kind, nonce, padded length, ciphertext, tag.
pub fn seal(
    key: &[u8],
    kind: MsgKind,
    nonce: [u8; NONCE_LEN],
    plaintext: &[u8],
    class_len: usize,
) -> Result<Vec<u8>, SecretsError> {
    if plaintext.len() + 4 > class_len {
        return Err(SecretsError::ClassOverflow {
            len: plaintext.len(),
            class: class_len,
        });
    }
    let enc_key = derive(key, b"mvoram.enc");
    let mac_key = derive(key, b"mvoram.mac");
    let mut body = Vec::with_capacity(class_len);
    body.extend_from_slice(&(plaintext.len() as u32).to_le_bytes());
    body.extend_from_slice(plaintext);
    body.resize(class_len, 0);
    keystream_xor(&enc_key, &nonce, &mut body);
    let tag = tag_for(&mac_key, kind as u8, &nonce, &body);
    let mut out = Vec::with_capacity(ENVELOPE_OVERHEAD + class_len);
    out.push(kind as u8);
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&(class_len as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&tag);
    Ok(out)
}

/// Opens an envelope, rejecting any tampering.
pub fn open(key: &[u8], envelope: &[u8]) -> Result<(MsgKind, Vec<u8>), SecretsError> {
    if envelope.len() < ENVELOPE_OVERHEAD {
        return Err(SecretsError::MalformedEnvelope("short"));
    }
    let kind_byte = envelope[0];
    let kind = MsgKind::from_u8(kind_byte).ok_or(SecretsError::MalformedEnvelope("kind"))?;
    let nonce: [u8; NONCE_LEN] = envelope[1..1 + NONCE_LEN].try_into().unwrap();
    let class_len =
        u32::from_le_bytes(envelope[1 + NONCE_LEN..1 + NONCE_LEN + 4].try_into().unwrap()) as usize;
    if envelope.len() != ENVELOPE_OVERHEAD + class_len {
        return Err(SecretsError::MalformedEnvelope("length field"));
    }
    let body_start = 1 + NONCE_LEN + 4;
    let ciphertext = &envelope[body_start..body_start + class_len];
    let tag = &envelope[body_start + class_len..];
    let mac_key = derive(key, b"mvoram.mac");
    if tag_for(&mac_key, kind_byte, &nonce, ciphertext) != *tag {
        return Err(SecretsError::AuthFailure);
    }
    let enc_key = derive(key, b"mvoram.enc");
    let mut body = ciphertext.to_vec();
    keystream_xor(&enc_key, &nonce, &mut body);
    let true_len = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
    if true_len + 4 > class_len {
        return Err(SecretsError::MalformedEnvelope("inner length"));
    }
    body.drain(..4);
    body.truncate(true_len);
    Ok((kind, body))
}

/// Nonce every replica derives identically for a reply at a log position,
/// so correct replicas emit byte-identical envelopes.
pub fn reply_nonce(log_position: u64, kind: MsgKind) -> [u8; NONCE_LEN] {
    let mut h = Sha256::new();
    h.update(b"mvoram.reply-nonce");
    h.update(log_position.to_le_bytes());
    h.update([kind as u8]);
    let d = h.finalize();
    d[..NONCE_LEN].try_into().unwrap()
}

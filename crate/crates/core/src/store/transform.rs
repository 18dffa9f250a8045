//! Keyed stream transform and multi-pass overwrite.
//!
//! The transform XORs with a ChaCha20 keystream derived from `(key, nonce)`.
//! It is invertible and length-preserving, which is all the engine needs for
//! escrow and at-rest encoding. It is not an authenticated cipher.

use std::fs::File;
use std::os::unix::fs::FileExt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type Key = [u8; 32];

pub fn keystream_xor(key: &Key, nonce: u64, data: &mut [u8]) {
    let mut h = Sha256::new();
    h.update(key);
    h.update(nonce.to_le_bytes());
    let seed: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha20Rng::from_seed(seed);
    let mut stream = vec![0u8; data.len()];
    rng.fill_bytes(&mut stream);
    for (d, s) in data.iter_mut().zip(stream) {
        *d ^= s;
    }
}

pub fn derive_key(seed: u64, label: &str) -> Key {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

/// Overwrites `[offset, offset + len)` with 0x00, 0xFF and a pseudo-random
/// pass, syncing after each, then leaves zeros behind.
pub fn sanitize_range(file: &File, offset: u64, len: usize, rng: &mut ChaCha20Rng) -> std::io::Result<()> {
    if len == 0 {
        return Ok(());
    }
    let mut random = vec![0u8; len];
    rng.fill_bytes(&mut random);
    for pass in [vec![0x00; len], vec![0xFF; len], random, vec![0x00; len]] {
        file.write_all_at(&pass, offset)?;
        file.sync_data()?;
    }
    Ok(())
}

//! Fixed-width value cells shared by update pairs and vertex entries.
//!
//! Values travel as 16-byte little-endian cells; the effective width
//! (0, 4, 8 or 16 bytes) is carried by the surrounding configuration, not by
//! each cell. Helpers below encode the common u64/f64 interpretations.

/// Inline storage for one fixed-width value.
pub type ValueBytes = [u8; 16];

/// Maximum supported value width in bytes.
pub const MAX_VALUE_WIDTH: usize = 16;

pub const ZERO_VALUE: ValueBytes = [0u8; 16];

pub fn val_u64(x: u64) -> ValueBytes {
    let mut v = ZERO_VALUE;
    v[..8].copy_from_slice(&x.to_le_bytes());
    v
}

pub fn get_u64(v: &ValueBytes) -> u64 {
    u64::from_le_bytes(v[..8].try_into().unwrap())
}

pub fn val_f64(x: f64) -> ValueBytes {
    let mut v = ZERO_VALUE;
    v[..8].copy_from_slice(&x.to_le_bytes());
    v
}

pub fn get_f64(v: &ValueBytes) -> f64 {
    f64::from_le_bytes(v[..8].try_into().unwrap())
}

/// Packs two u64 fields into one 16-byte cell.
pub fn val_u64_pair(a: u64, b: u64) -> ValueBytes {
    let mut v = ZERO_VALUE;
    v[..8].copy_from_slice(&a.to_le_bytes());
    v[8..].copy_from_slice(&b.to_le_bytes());
    v
}

pub fn get_u64_pair(v: &ValueBytes) -> (u64, u64) {
    (
        u64::from_le_bytes(v[..8].try_into().unwrap()),
        u64::from_le_bytes(v[8..].try_into().unwrap()),
    )
}

/// Widens a raw little-endian slice (at most 16 bytes) into a value cell.
pub fn from_slice(bytes: &[u8]) -> ValueBytes {
    debug_assert!(bytes.len() <= MAX_VALUE_WIDTH);
    let mut v = ZERO_VALUE;
    v[..bytes.len()].copy_from_slice(bytes);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u64_round_trip() {
        assert_eq!(get_u64(&val_u64(0)), 0);
        assert_eq!(get_u64(&val_u64(u64::MAX)), u64::MAX);
    }

    #[test]
    fn f64_round_trip() {
        assert_eq!(get_f64(&val_f64(0.85)), 0.85);
    }

    #[test]
    fn pair_round_trip() {
        assert_eq!(get_u64_pair(&val_u64_pair(3, 9)), (3, 9));
    }
}

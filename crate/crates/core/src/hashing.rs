//! Seeded string hashing for feature hashing. Stable across platforms and releases,
//! unlike `std`'s `DefaultHasher`.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn hash_bytes(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix64(seed);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

/// Character n-grams of `text` for every `n` in `ns`, with `^`/`$` boundary markers.
pub fn char_ngrams(text: &str, ns: std::ops::RangeInclusive<usize>) -> Vec<String> {
    let padded: Vec<char> = std::iter::once('^')
        .chain(text.chars())
        .chain(std::iter::once('$'))
        .collect();
    let mut out = Vec::new();
    for n in ns {
        if n > padded.len() {
            break;
        }
        out.extend(padded.windows(n).map(|w| w.iter().collect::<String>()));
    }
    out
}

/// Signed feature hashing: bucket index and ±1 sign.
pub fn signed_bucket(feature: &str, buckets: usize, seed: u64) -> (usize, f64) {
    let h = hash_bytes(feature.as_bytes(), seed);
    let idx = (h % buckets as u64) as usize;
    let sign = if (h >> 63) == 1 { -1.0 } else { 1.0 };
    (idx, sign)
}

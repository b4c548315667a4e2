//! Shamir sharing of the data key across replicas: interpolation from any
//! t+1 shares, and consistency voting when corrupted shares are mixed in.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use mvoram::secrets::{reconstruct_key, share_key};

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let key = b"a thirty-two byte session key!!!".to_vec();
    let (n, t) = (7usize, 2usize);
    let shares = share_key(&key, n, t, &mut rng).expect("n > t");
    println!("split a {}-byte key into {n} shares, threshold t={t}", key.len());

    // Any t+1 shares interpolate the key.
    let got = reconstruct_key(&shares[2..=4], t).expect("t+1 shares suffice");
    assert_eq!(got, key);
    println!("shares 3..5 reconstruct the key");

    // With all n shares and t of them corrupted, voting still finds the
    // unique polynomial consistent with the honest quorum.
    let mut tampered = shares.clone();
    tampered[0].words[0] ^= 0x1234;
    tampered[5].words[0] ^= 0x4321;
    let got = reconstruct_key(&tampered, t).expect("2t+1 honest shares present");
    assert_eq!(got, key);
    println!("key recovered despite {t} corrupted shares among {n}");

    // With only t+1 honest shares against t corrupted ones, the corrupted
    // polynomial is just as consistent: reconstruction refuses to guess.
    let subset = vec![
        tampered[0].clone(), // corrupted
        shares[1].clone(),
        shares[2].clone(),
        shares[3].clone(),
        tampered[5].clone(), // corrupted
    ];
    let err = reconstruct_key(&subset, t).expect_err("ambiguous");
    println!("with only t+1 honest of 2t+1 shares: {err}");
}

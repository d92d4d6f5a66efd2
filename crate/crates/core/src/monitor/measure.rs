//! Measurement of a domain bundle with its manifest, and the keys and
//! attestation answers derived from it.

use hmac::{Hmac, KeyInit, Mac};
use sha2::{Digest, Sha256};

use crate::scenario::{DomainSpec, PlatformSpec, Scenario};

fn field(out: &mut Vec<u8>, key: &str, value: &[u8]) {
    out.extend_from_slice(&(key.len() as u32).to_le_bytes());
    out.extend_from_slice(key.as_bytes());
    out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    out.extend_from_slice(value);
}

fn string_list(mut items: Vec<String>) -> Vec<u8> {
    items.sort();
    let mut out = Vec::new();
    for s in items {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    out
}

/// Manifest in canonical form: fields in key order, each key and value
/// prefixed with its little-endian u32 length.
pub fn canonical_manifest(d: &DomainSpec, platform: &PlatformSpec, scenario: &Scenario) -> Vec<u8> {
    let mut out = Vec::new();
    field(
        &mut out,
        "binary_digest_expected",
        d.binary_digest.as_ref().map_or(&[][..], |b| &b[..]),
    );
    field(&mut out, "memory_demand", &d.memory_demand.to_le_bytes());
    field(&mut out, "name", d.name.as_bytes());
    let peripherals = d
        .peripherals
        .iter()
        .map(|r| format!("{}:{}", platform.peripherals[r.peripheral].name, r.mode))
        .collect();
    field(&mut out, "peripherals", &string_list(peripherals));
    let shared = d
        .shared
        .iter()
        .map(|s| {
            let mut peers: Vec<&str> = s
                .peers
                .iter()
                .map(|p| scenario.domains[*p].name.as_str())
                .collect();
            peers.sort();
            format!(
                "{}:{}",
                platform.shared_regions[s.region].name,
                peers.join(",")
            )
        })
        .collect();
    field(&mut out, "shared_regions", &string_list(shared));
    out
}

pub fn measure(bundle: &[u8], canonical: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bundle);
    h.update(canonical);
    h.finalize().into()
}

pub fn binary_digest(bundle: &[u8]) -> [u8; 32] {
    Sha256::digest(bundle).into()
}

pub fn derive_key(device_key: &[u8; 32], measurement: &[u8; 32]) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(device_key).expect("any key length");
    mac.update(measurement);
    mac.finalize().into_bytes().into()
}

/// First eight bytes, little endian: what fits in a monitor-call return.
pub fn word(bytes: &[u8; 32]) -> u64 {
    u64::from_le_bytes(bytes[..8].try_into().expect("eight bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse;

    fn unhex(s: &str) -> Vec<u8> {
        hex::decode(s).expect("hex")
    }

    #[test]
    fn measurement_is_sha256_of_bundle_then_manifest() {
        // FIPS 180-2 "abc" vector, split across the two inputs.
        assert_eq!(
            measure(b"ab", b"c").to_vec(),
            unhex("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
        );
        assert_eq!(
            binary_digest(b"").to_vec(),
            unhex("e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")
        );
    }

    /// HMAC spelled out over the raw hash.
    fn hmac_by_hand(key: &[u8; 32], msg: &[u8]) -> Vec<u8> {
        let mut k = [0u8; 64];
        k[..32].copy_from_slice(key);
        let pad = |b: u8| k.iter().map(|x| x ^ b).collect::<Vec<u8>>();
        let mut inner = pad(0x36);
        inner.extend_from_slice(msg);
        let mut outer = pad(0x5c);
        outer.extend_from_slice(&Sha256::digest(&inner));
        Sha256::digest(&outer).to_vec()
    }

    #[test]
    fn key_is_hmac_of_measurement_under_device_key() {
        let device = [0x42u8; 32];
        let m = measure(b"bundle", b"manifest");
        assert_eq!(derive_key(&device, &m).to_vec(), hmac_by_hand(&device, &m));
        assert_ne!(derive_key(&device, &m), derive_key(&[0x43; 32], &m));
    }

    #[test]
    fn word_is_little_endian_prefix() {
        let mut b = [0u8; 32];
        b[0] = 0x01;
        b[7] = 0x80;
        b[8] = 0xff;
        assert_eq!(word(&b), 0x8000_0000_0000_0001);
    }

    const TEXT: &str = r#"
name = "m"
[platform]
cores = 1
dram = { base = 0x80000000, size = 0x400000 }
[[platform.peripheral]]
name = "uart0"
kind = "uart"
base = 0x1c090000
size = 0x1000
intids = [33]
modes = ["exclusive"]
[[platform.shared_region]]
name = "box"
base = 0x80300000
size = 0x1000
[[domain]]
name = "legacy"
scheduler = true
memory = { base = 0x80000000, size = 0x100000 }
cores = [0]
shared = [{ region = "box", peers = ["app"] }]
[[domain]]
name = "app"
bundle = "app-v1"
memory_demand = 0x2000
peripherals = [{ name = "uart0", mode = "exclusive" }]
shared = [{ region = "box", peers = ["legacy"] }]
"#;

    #[test]
    fn canonical_manifest_layout() {
        let s = parse(TEXT).expect("parses");
        let app = &s.domains[1];
        let mut want = Vec::new();
        let push = |out: &mut Vec<u8>, bytes: &[u8]| {
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(bytes);
        };
        push(&mut want, b"binary_digest_expected");
        push(&mut want, b"");
        push(&mut want, b"memory_demand");
        push(&mut want, &0x2000u64.to_le_bytes());
        push(&mut want, b"name");
        push(&mut want, b"app");
        let mut list = Vec::new();
        push(&mut list, b"uart0:exclusive");
        push(&mut want, b"peripherals");
        push(&mut want, &list);
        let mut list = Vec::new();
        push(&mut list, b"box:legacy");
        push(&mut want, b"shared_regions");
        push(&mut want, &list);
        assert_eq!(canonical_manifest(app, &s.platform, &s), want);
    }
}

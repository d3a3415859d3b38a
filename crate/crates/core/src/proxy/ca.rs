//! Local certificate authority for TLS interception.
//!
//! The CA material lives in a directory as `ca.pem` / `ca.key`. It is
//! generated on first use and reloaded afterwards; the certificate PEM is
//! what gets installed into the browser's trust store. Leaf certificates
//! are minted per host and cached, so repeated handshakes for one host see
//! the identical certificate.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rcgen::{
    BasicConstraints, CertificateParams, DistinguishedName, DnType, ExtendedKeyUsagePurpose, IsCa,
    Issuer, KeyPair, KeyUsagePurpose, SanType,
};
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer, ServerName, UnixTime};
use rustls::RootCertStore;
use thiserror::Error;

pub const CA_CERT_FILE: &str = "ca.pem";
pub const CA_KEY_FILE: &str = "ca.key";

#[derive(Debug, Error)]
pub enum CaError {
    #[error("certificate authority I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("certificate generation failed: {0}")]
    Generation(String),
    #[error("invalid hostname {host:?}: {reason}")]
    InvalidHost { host: String, reason: String },
    #[error("CA material in {dir} is inconsistent: {reason}")]
    Inconsistent { dir: PathBuf, reason: String },
}

struct CachedLeaf {
    server_config: Arc<rustls::ServerConfig>,
    cert_der: CertificateDer<'static>,
    serial: Vec<u8>,
}

/// Root CA plus a per-host leaf cache.
pub struct CertAuthority {
    issuer: Issuer<'static, KeyPair>,
    cert_pem: String,
    cert_der: CertificateDer<'static>,
    leaves: Mutex<HashMap<String, Arc<CachedLeaf>>>,
}

impl std::fmt::Debug for CertAuthority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CertAuthority")
            .field("cached_leaves", &self.leaves.lock().map(|l| l.len()).unwrap_or(0))
            .finish_non_exhaustive()
    }
}

/// A minted leaf, ready to serve one intercepted host.
#[derive(Clone)]
pub struct MintedLeaf {
    pub server_config: Arc<rustls::ServerConfig>,
    pub cert_der: CertificateDer<'static>,
    /// DER-encoded serial number; identical across cache hits.
    pub serial: Vec<u8>,
    pub cache_hit: bool,
}

impl CertAuthority {
    /// Loads the CA pair from `dir`, generating and persisting a fresh one
    /// when the directory holds none. A half-present pair is an error.
    pub fn load_or_generate(dir: impl AsRef<Path>) -> Result<Self, CaError> {
        super::install_crypto_provider();
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| CaError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let cert_path = dir.join(CA_CERT_FILE);
        let key_path = dir.join(CA_KEY_FILE);
        match (cert_path.exists(), key_path.exists()) {
            (true, true) => Self::load(dir, &cert_path, &key_path),
            (false, false) => {
                let ca = Self::generate()?;
                write_restricted(&cert_path, ca.cert_pem.as_bytes())?;
                let key_pem = ca.issuer.key().serialize_pem();
                write_restricted(&key_path, key_pem.as_bytes())?;
                Ok(ca)
            }
            _ => Err(CaError::Inconsistent {
                dir: dir.to_path_buf(),
                reason: format!("{CA_CERT_FILE} and {CA_KEY_FILE} must both exist or both be absent"),
            }),
        }
    }

    fn generate() -> Result<Self, CaError> {
        let key = KeyPair::generate().map_err(|e| CaError::Generation(e.to_string()))?;
        let mut params = CertificateParams::default();
        params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        params.key_usages = vec![
            KeyUsagePurpose::DigitalSignature,
            KeyUsagePurpose::KeyCertSign,
            KeyUsagePurpose::CrlSign,
        ];
        let mut dn = DistinguishedName::new();
        dn.push(DnType::CommonName, "wiretally capture CA");
        dn.push(DnType::OrganizationName, "wiretally");
        params.distinguished_name = dn;
        let cert = params
            .self_signed(&key)
            .map_err(|e| CaError::Generation(e.to_string()))?;
        let cert_pem = cert.pem();
        let cert_der = cert.der().clone();
        Ok(Self {
            issuer: Issuer::new(params, key),
            cert_pem,
            cert_der,
            leaves: Mutex::new(HashMap::new()),
        })
    }

    fn load(dir: &Path, cert_path: &Path, key_path: &Path) -> Result<Self, CaError> {
        let read = |path: &Path| {
            std::fs::read_to_string(path).map_err(|e| CaError::Io {
                path: path.to_path_buf(),
                source: e,
            })
        };
        let cert_pem = read(cert_path)?;
        let key_pem = read(key_path)?;
        let key = KeyPair::from_pem(&key_pem).map_err(|e| CaError::Inconsistent {
            dir: dir.to_path_buf(),
            reason: format!("unreadable CA key: {e}"),
        })?;
        let cert_der = first_cert_der(&cert_pem).ok_or_else(|| CaError::Inconsistent {
            dir: dir.to_path_buf(),
            reason: "no certificate in ca.pem".to_string(),
        })?;
        let issuer =
            Issuer::from_ca_cert_der(&cert_der, key).map_err(|e| CaError::Inconsistent {
                dir: dir.to_path_buf(),
                reason: format!("unreadable CA certificate: {e}"),
            })?;
        let ca = Self {
            issuer,
            cert_pem,
            cert_der,
            leaves: Mutex::new(HashMap::new()),
        };
        ca.verify_pair(dir)?;
        Ok(ca)
    }

    /// Proves the loaded key signs for the loaded certificate by minting a
    /// probe leaf and verifying its chain against the CA as the sole trust
    /// anchor. A mismatched pair fails signature verification.
    fn verify_pair(&self, dir: &Path) -> Result<(), CaError> {
        let leaf = self.mint_leaf("ca-probe.invalid").map_err(|e| CaError::Inconsistent {
            dir: dir.to_path_buf(),
            reason: format!("probe mint failed: {e}"),
        })?;
        let mut roots = RootCertStore::empty();
        roots
            .add(self.cert_der.clone())
            .map_err(|e| CaError::Inconsistent {
                dir: dir.to_path_buf(),
                reason: format!("certificate rejected as trust anchor: {e}"),
            })?;
        let verifier = rustls::client::WebPkiServerVerifier::builder(Arc::new(roots))
            .build()
            .map_err(|e| CaError::Inconsistent {
                dir: dir.to_path_buf(),
                reason: e.to_string(),
            })?;
        use rustls::client::danger::ServerCertVerifier;
        let name = ServerName::try_from("ca-probe.invalid").expect("static name");
        verifier
            .verify_server_cert(&leaf.cert_der, &[], &name, &[], UnixTime::now())
            .map_err(|e| CaError::Inconsistent {
                dir: dir.to_path_buf(),
                reason: format!("key does not sign for certificate: {e}"),
            })?;
        Ok(())
    }

    /// PEM of the root certificate, for browser trust installation.
    pub fn cert_pem(&self) -> &str {
        &self.cert_pem
    }

    pub fn cert_der(&self) -> &CertificateDer<'static> {
        &self.cert_der
    }

    /// Mints (or returns the cached) leaf certificate for `host`, wrapped
    /// in a ready TLS server config restricted to HTTP/1.1.
    pub fn mint_leaf(&self, host: &str) -> Result<MintedLeaf, CaError> {
        let normalized = normalize_host(host)?;
        if let Some(cached) = self.leaves.lock().expect("leaf cache lock").get(&normalized) {
            return Ok(MintedLeaf {
                server_config: Arc::clone(&cached.server_config),
                cert_der: cached.cert_der.clone(),
                serial: cached.serial.clone(),
                cache_hit: true,
            });
        }

        let san = if let Ok(ip) = normalized.parse::<std::net::IpAddr>() {
            SanType::IpAddress(ip)
        } else {
            SanType::DnsName(normalized.clone().try_into().map_err(|e| {
                CaError::InvalidHost {
                    host: host.to_string(),
                    reason: format!("{e}"),
                }
            })?)
        };
        let mut params = CertificateParams::default();
        params.subject_alt_names = vec![san];
        params.is_ca = IsCa::NoCa;
        params.key_usages = vec![
            KeyUsagePurpose::DigitalSignature,
            KeyUsagePurpose::KeyEncipherment,
        ];
        params.extended_key_usages = vec![ExtendedKeyUsagePurpose::ServerAuth];
        let mut dn = DistinguishedName::new();
        dn.push(DnType::CommonName, normalized.clone());
        params.distinguished_name = dn;

        let key = KeyPair::generate().map_err(|e| CaError::Generation(e.to_string()))?;
        let cert = params
            .signed_by(&key, &self.issuer)
            .map_err(|e| CaError::Generation(e.to_string()))?;
        let cert_der = cert.der().clone();
        let serial = extract_serial(&cert_der);

        let chain = vec![cert_der.clone(), self.cert_der.clone()];
        let key_der = PrivateKeyDer::from(PrivatePkcs8KeyDer::from(key.serialize_der()));
        let mut server_config = rustls::ServerConfig::builder()
            .with_no_client_auth()
            .with_single_cert(chain, key_der)
            .map_err(|e| CaError::Generation(e.to_string()))?;
        // Interception is HTTP/1.1 only: upstream h2 negotiation is
        // disabled so flow delimitation stays unambiguous.
        server_config.alpn_protocols = vec![b"http/1.1".to_vec()];

        let cached = Arc::new(CachedLeaf {
            server_config: Arc::new(server_config),
            cert_der,
            serial,
        });
        self.leaves
            .lock()
            .expect("leaf cache lock")
            .insert(normalized, Arc::clone(&cached));
        Ok(MintedLeaf {
            server_config: Arc::clone(&cached.server_config),
            cert_der: cached.cert_der.clone(),
            serial: cached.serial.clone(),
            cache_hit: false,
        })
    }
}

fn normalize_host(host: &str) -> Result<String, CaError> {
    let invalid = |reason: &str| CaError::InvalidHost {
        host: host.to_string(),
        reason: reason.to_string(),
    };
    if host.is_empty() {
        return Err(invalid("empty host"));
    }
    if host.bytes().any(|b| b == 0) {
        return Err(invalid("embedded NUL"));
    }
    if host.chars().any(char::is_whitespace) {
        return Err(invalid("whitespace in hostname"));
    }
    Ok(host.to_ascii_lowercase())
}

fn first_cert_der(pem: &str) -> Option<CertificateDer<'static>> {
    let mut reader = std::io::BufReader::new(pem.as_bytes());
    let certs: Vec<_> = rustls_pemfile::certs(&mut reader)
        .filter_map(Result::ok)
        .collect();
    certs.into_iter().next()
}

/// Pulls the serial number out of a DER certificate. The serial is the
/// first INTEGER inside the TBSCertificate sequence (after the optional
/// explicit version tag).
fn extract_serial(cert: &CertificateDer<'_>) -> Vec<u8> {
    fn read_len(bytes: &[u8], mut idx: usize) -> Option<(usize, usize)> {
        let first = *bytes.get(idx)?;
        idx += 1;
        if first & 0x80 == 0 {
            return Some((first as usize, idx));
        }
        let n = (first & 0x7f) as usize;
        let mut len = 0usize;
        for _ in 0..n {
            len = (len << 8) | *bytes.get(idx)? as usize;
            idx += 1;
        }
        Some((len, idx))
    }
    let bytes = cert.as_ref();
    let parse = || -> Option<Vec<u8>> {
        // Outer SEQUENCE (Certificate)
        let (_, mut idx) = read_len(bytes, 1)?;
        // TBSCertificate SEQUENCE
        if *bytes.get(idx)? != 0x30 {
            return None;
        }
        let (_, mut inner) = read_len(bytes, idx + 1)?;
        // Optional [0] EXPLICIT version
        if *bytes.get(inner)? == 0xa0 {
            let (len, next) = read_len(bytes, inner + 1)?;
            inner = next + len;
        }
        // serialNumber INTEGER
        if *bytes.get(inner)? != 0x02 {
            return None;
        }
        let (len, start) = read_len(bytes, inner + 1)?;
        idx = start;
        Some(bytes.get(idx..idx + len)?.to_vec())
    };
    parse().unwrap_or_default()
}

fn write_restricted(path: &Path, contents: &[u8]) -> Result<(), CaError> {
    std::fs::write(path, contents).map_err(|e| CaError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let _ = std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generates_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let ca = CertAuthority::load_or_generate(dir.path()).unwrap();
        let pem_first = ca.cert_pem().to_string();
        drop(ca);
        let ca = CertAuthority::load_or_generate(dir.path()).unwrap();
        assert_eq!(ca.cert_pem(), pem_first, "reload keeps the same root");
    }

    #[test]
    fn half_present_pair_is_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(CA_CERT_FILE), "not a cert").unwrap();
        assert!(matches!(
            CertAuthority::load_or_generate(dir.path()),
            Err(CaError::Inconsistent { .. })
        ));
    }

    #[test]
    fn mismatched_key_detected() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        CertAuthority::load_or_generate(dir_a.path()).unwrap();
        CertAuthority::load_or_generate(dir_b.path()).unwrap();
        // Swap B's key under A's certificate.
        std::fs::copy(dir_b.path().join(CA_KEY_FILE), dir_a.path().join(CA_KEY_FILE)).unwrap();
        let err = CertAuthority::load_or_generate(dir_a.path()).unwrap_err();
        assert!(
            matches!(&err, CaError::Inconsistent { reason, .. } if reason.contains("does not sign")),
            "got {err}"
        );
    }

    #[test]
    fn leaf_covers_host_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let ca = CertAuthority::load_or_generate(dir.path()).unwrap();
        let first = ca.mint_leaf("Example.org").unwrap();
        assert!(!first.cache_hit);
        assert!(!first.serial.is_empty());
        let second = ca.mint_leaf("example.org").unwrap();
        assert!(second.cache_hit);
        assert_eq!(first.serial, second.serial, "cache returns identical cert");

        // SAN check via a real chain verification for that name.
        let mut roots = RootCertStore::empty();
        roots.add(ca.cert_der().clone()).unwrap();
        let verifier = rustls::client::WebPkiServerVerifier::builder(Arc::new(roots))
            .build()
            .unwrap();
        use rustls::client::danger::ServerCertVerifier;
        let name = ServerName::try_from("example.org").unwrap();
        verifier
            .verify_server_cert(&first.cert_der, &[], &name, &[], UnixTime::now())
            .expect("SAN must cover requested host");
        let other = ServerName::try_from("other.org").unwrap();
        assert!(verifier
            .verify_server_cert(&first.cert_der, &[], &other, &[], UnixTime::now())
            .is_err());
    }

    #[test]
    fn invalid_hostnames_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ca = CertAuthority::load_or_generate(dir.path()).unwrap();
        assert!(matches!(ca.mint_leaf("bad\0host"), Err(CaError::InvalidHost { .. })));
        assert!(matches!(ca.mint_leaf(""), Err(CaError::InvalidHost { .. })));
        assert!(matches!(ca.mint_leaf("sp ace"), Err(CaError::InvalidHost { .. })));
    }

    #[test]
    fn ip_hosts_get_ip_sans() {
        let dir = tempfile::tempdir().unwrap();
        let ca = CertAuthority::load_or_generate(dir.path()).unwrap();
        let leaf = ca.mint_leaf("127.0.0.1").unwrap();
        let mut roots = RootCertStore::empty();
        roots.add(ca.cert_der().clone()).unwrap();
        let verifier = rustls::client::WebPkiServerVerifier::builder(Arc::new(roots))
            .build()
            .unwrap();
        use rustls::client::danger::ServerCertVerifier;
        let name = ServerName::try_from("127.0.0.1").unwrap();
        verifier
            .verify_server_cert(&leaf.cert_der, &[], &name, &[], UnixTime::now())
            .expect("IP SAN must verify");
    }
}

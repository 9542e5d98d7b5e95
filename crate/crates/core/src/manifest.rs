//! Deployment manifests.
//!
//! A manifest is a JSON document naming every service, its memory budget and
//! safety class, which peers it may import, the mesh policy for each edge, and
//! the toolchain allowlist used for provenance checks.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

/// Sandboxed services address at most 4 GiB of linear memory.
pub const SANDBOX_MEMORY_CAP: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Sandboxed,
    Native,
}

impl ServiceKind {
    pub fn safety_class(self) -> SafetyClass {
        match self {
            ServiceKind::Native => SafetyClass::ObjectGranular,
            ServiceKind::Sandboxed => SafetyClass::RegionGranular,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ServiceKind::Sandboxed => "sandboxed",
            ServiceKind::Native => "native",
        }
    }
}

/// Granularity at which a service's memory safety is enforced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum SafetyClass {
    /// Per-object safety from the language's type system (trusted native code).
    ObjectGranular,
    /// Safety only at the boundary of the service's linear memory.
    RegionGranular,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ServiceDescriptor {
    pub name: String,
    pub kind: ServiceKind,
    /// Module image; present iff `kind` is sandboxed.
    pub image_path: Option<PathBuf>,
    pub memory_bytes: u64,
    pub max_memory_bytes: u64,
    pub toolchain: String,
    pub imports: Vec<String>,
}

impl ServiceDescriptor {
    pub fn safety_class(&self) -> SafetyClass {
        self.kind.safety_class()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum MeshMode {
    Passthrough,
    Intercept { proxy: String },
    ElideAfter { proxy: String, n: u64 },
}

impl MeshMode {
    pub fn proxy(&self) -> Option<&str> {
        match self {
            MeshMode::Passthrough => None,
            MeshMode::Intercept { proxy } | MeshMode::ElideAfter { proxy, .. } => Some(proxy),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct MeshPolicy {
    pub caller: String,
    pub callee: String,
    pub mode: MeshMode,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Manifest {
    pub services: Vec<ServiceDescriptor>,
    pub mesh_policies: Vec<MeshPolicy>,
    pub allowlist: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("malformed JSON: {0}")]
    Syntax(String),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> ManifestError {
    ManifestError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

/// A referential or bounds problem found by [`validate_manifest`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Violation {
    DuplicateService { path: String, name: String },
    InvalidName { path: String, name: String },
    MemoryBounds { path: String, service: String, memory_bytes: u64, max_memory_bytes: u64 },
    ExceedsSandboxCap { path: String, service: String, max_memory_bytes: u64 },
    MissingImage { path: String, service: String },
    DanglingImport { path: String, service: String, import: String },
    DanglingMeshEndpoint { path: String, role: &'static str, name: String },
    DuplicateMeshEdge { path: String, caller: String, callee: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateService { path, name } => write!(f, "{path}: duplicate service {name:?}"),
            Violation::InvalidName { path, name } => write!(f, "{path}: invalid service name {name:?}"),
            Violation::MemoryBounds { path, service, memory_bytes, max_memory_bytes } => write!(
                f,
                "{path}: service {service:?} memory_bytes {memory_bytes} > max_memory_bytes {max_memory_bytes}"
            ),
            Violation::ExceedsSandboxCap { path, service, max_memory_bytes } => write!(
                f,
                "{path}: sandboxed service {service:?} max_memory_bytes {max_memory_bytes} exceeds 4 GiB cap"
            ),
            Violation::MissingImage { path, service } => write!(f, "{path}: sandboxed service {service:?} has no image"),
            Violation::DanglingImport { path, service, import } => {
                write!(f, "{path}: service {service:?} imports undeclared service {import:?}")
            }
            Violation::DanglingMeshEndpoint { path, role, name } => {
                write!(f, "{path}: mesh {role} {name:?} is not a declared service")
            }
            Violation::DuplicateMeshEdge { path, caller, callee } => {
                write!(f, "{path}: more than one policy for edge {caller:?} -> {callee:?}")
            }
        }
    }
}

pub fn is_valid_service_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'_' | b'.' | b'-'))
}

struct Obj<'a> {
    path: String,
    map: &'a Map<String, Value>,
}

impl<'a> Obj<'a> {
    fn new(path: String, v: &'a Value, allowed: &[&str]) -> Result<Self, ManifestError> {
        let map = v.as_object().ok_or_else(|| schema(path.clone(), "expected an object"))?;
        if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(schema(format!("{path}/{k}"), "unknown key"));
        }
        Ok(Obj { path, map })
    }

    fn at(&self, key: &str) -> String {
        format!("{}/{key}", self.path)
    }

    fn get(&self, key: &str) -> Result<&'a Value, ManifestError> {
        self.map.get(key).ok_or_else(|| schema(self.at(key), "missing required key"))
    }

    fn string(&self, key: &str) -> Result<String, ManifestError> {
        self.get(key)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| schema(self.at(key), "expected a string"))
    }

    fn u64(&self, key: &str) -> Result<u64, ManifestError> {
        self.get(key)?
            .as_u64()
            .ok_or_else(|| schema(self.at(key), "expected a non-negative integer"))
    }

    fn strings(&self, key: &str) -> Result<Vec<String>, ManifestError> {
        let arr = self
            .get(key)?
            .as_array()
            .ok_or_else(|| schema(self.at(key), "expected an array"))?;
        arr.iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| schema(format!("{}/{i}", self.at(key)), "expected a string"))
            })
            .collect()
    }

    fn array(&self, key: &str) -> Result<&'a Vec<Value>, ManifestError> {
        self.get(key)?
            .as_array()
            .ok_or_else(|| schema(self.at(key), "expected an array"))
    }
}

fn parse_service(path: String, v: &Value) -> Result<ServiceDescriptor, ManifestError> {
    let o = Obj::new(
        path,
        v,
        &["name", "kind", "image", "memory_bytes", "max_memory_bytes", "toolchain", "imports"],
    )?;
    let name = o.string("name")?;
    if !is_valid_service_name(&name) {
        return Err(schema(o.at("name"), format!("{name:?} does not match [a-z0-9_.-]+")));
    }
    let kind = match o.string("kind")?.as_str() {
        "sandboxed" => ServiceKind::Sandboxed,
        "native" => ServiceKind::Native,
        other => return Err(schema(o.at("kind"), format!("unknown kind {other:?}"))),
    };
    let image_path = match (kind, o.map.contains_key("image")) {
        (ServiceKind::Sandboxed, _) => Some(PathBuf::from(o.string("image")?)),
        (ServiceKind::Native, true) => return Err(schema(o.at("image"), "image is only valid for sandboxed services")),
        (ServiceKind::Native, false) => None,
    };
    let memory_bytes = o.u64("memory_bytes")?;
    let max_memory_bytes = o.u64("max_memory_bytes")?;
    if memory_bytes > max_memory_bytes {
        return Err(schema(o.at("memory_bytes"), format!("{memory_bytes} exceeds max_memory_bytes {max_memory_bytes}")));
    }
    if kind == ServiceKind::Sandboxed && max_memory_bytes > SANDBOX_MEMORY_CAP {
        return Err(schema(o.at("max_memory_bytes"), format!("{max_memory_bytes} exceeds 4 GiB cap")));
    }
    Ok(ServiceDescriptor {
        name,
        kind,
        image_path,
        memory_bytes,
        max_memory_bytes,
        toolchain: o.string("toolchain")?,
        imports: o.strings("imports")?,
    })
}

fn parse_policy(path: String, v: &Value) -> Result<MeshPolicy, ManifestError> {
    let o = Obj::new(path, v, &["caller", "callee", "policy", "proxy", "elide_after"])?;
    let caller = o.string("caller")?;
    let callee = o.string("callee")?;
    let policy = o.string("policy")?;
    let forbid = |key: &str| -> Result<(), ManifestError> {
        if o.map.contains_key(key) {
            Err(schema(o.at(key), format!("not valid for policy {policy:?}")))
        } else {
            Ok(())
        }
    };
    let mode = match policy.as_str() {
        "passthrough" => {
            forbid("proxy")?;
            forbid("elide_after")?;
            MeshMode::Passthrough
        }
        "intercept" => {
            forbid("elide_after")?;
            MeshMode::Intercept {
                proxy: o.string("proxy")?,
            }
        }
        "elide_after" => {
            let n = o.u64("elide_after")?;
            if n == 0 {
                return Err(schema(o.at("elide_after"), "must be at least 1"));
            }
            MeshMode::ElideAfter {
                proxy: o.string("proxy")?,
                n,
            }
        }
        other => return Err(schema(o.at("policy"), format!("unknown policy {other:?}"))),
    };
    Ok(MeshPolicy { caller, callee, mode })
}

/// Parses a manifest document. Unknown keys and per-service invariant
/// violations are schema errors; cross-references are left to
/// [`validate_manifest`].
pub fn parse_manifest(text: &str) -> Result<Manifest, ManifestError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| ManifestError::Syntax(e.to_string()))?;
    let top = Obj::new(String::new(), &doc, &["services", "mesh", "allowlist"])?;

    let mut services = Vec::new();
    let mut seen = HashSet::new();
    for (i, v) in top.array("services")?.iter().enumerate() {
        let path = format!("/services/{i}");
        let svc = parse_service(path.clone(), v)?;
        if !seen.insert(svc.name.clone()) {
            return Err(schema(format!("{path}/name"), format!("duplicate service name {:?}", svc.name)));
        }
        services.push(svc);
    }
    let mesh_policies = top
        .array("mesh")?
        .iter()
        .enumerate()
        .map(|(i, v)| parse_policy(format!("/mesh/{i}"), v))
        .collect::<Result<_, _>>()?;
    let allowlist = top.strings("allowlist")?;
    Ok(Manifest {
        services,
        mesh_policies,
        allowlist,
    })
}

/// Reports every violation, not just the first.
pub fn validate_manifest(m: &Manifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut names = HashSet::new();
    for (i, s) in m.services.iter().enumerate() {
        let path = format!("/services/{i}");
        if !names.insert(s.name.as_str()) {
            out.push(Violation::DuplicateService { path: path.clone(), name: s.name.clone() });
        }
        if !is_valid_service_name(&s.name) {
            out.push(Violation::InvalidName { path: path.clone(), name: s.name.clone() });
        }
        if s.memory_bytes > s.max_memory_bytes {
            out.push(Violation::MemoryBounds {
                path: path.clone(),
                service: s.name.clone(),
                memory_bytes: s.memory_bytes,
                max_memory_bytes: s.max_memory_bytes,
            });
        }
        if s.kind == ServiceKind::Sandboxed {
            if s.max_memory_bytes > SANDBOX_MEMORY_CAP {
                out.push(Violation::ExceedsSandboxCap {
                    path: path.clone(),
                    service: s.name.clone(),
                    max_memory_bytes: s.max_memory_bytes,
                });
            }
            if s.image_path.is_none() {
                out.push(Violation::MissingImage { path: path.clone(), service: s.name.clone() });
            }
        }
    }
    for (i, s) in m.services.iter().enumerate() {
        for (j, imp) in s.imports.iter().enumerate() {
            if !names.contains(imp.as_str()) {
                out.push(Violation::DanglingImport {
                    path: format!("/services/{i}/imports/{j}"),
                    service: s.name.clone(),
                    import: imp.clone(),
                });
            }
        }
    }
    let mut edges = HashSet::new();
    for (i, p) in m.mesh_policies.iter().enumerate() {
        let path = format!("/mesh/{i}");
        let endpoints = [("caller", Some(&p.caller)), ("callee", Some(&p.callee))];
        let proxy = p.mode.proxy().map(str::to_string);
        for (role, name) in endpoints.into_iter().chain([("proxy", proxy.as_ref())]) {
            if let Some(name) = name {
                if !names.contains(name.as_str()) {
                    out.push(Violation::DanglingMeshEndpoint {
                        path: format!("{path}/{role}"),
                        role,
                        name: name.clone(),
                    });
                }
            }
        }
        if !edges.insert((p.caller.as_str(), p.callee.as_str())) {
            out.push(Violation::DuplicateMeshEdge {
                path,
                caller: p.caller.clone(),
                callee: p.callee.clone(),
            });
        }
    }
    out
}

/// True iff the service's toolchain id is exactly on the allowlist. An empty
/// allowlist admits nothing.
pub fn verify_provenance(d: &ServiceDescriptor, allowlist: &[String]) -> bool {
    allowlist.contains(&d.toolchain)
}

impl Manifest {
    pub fn service(&self, name: &str) -> Option<&ServiceDescriptor> {
        self.services.iter().find(|s| s.name == name)
    }

    pub fn to_value(&self) -> Value {
        let services: Vec<Value> = self
            .services
            .iter()
            .map(|s| {
                let mut o = json!({
                    "name": s.name,
                    "kind": s.kind.as_str(),
                    "memory_bytes": s.memory_bytes,
                    "max_memory_bytes": s.max_memory_bytes,
                    "toolchain": s.toolchain,
                    "imports": s.imports,
                });
                if let Some(p) = &s.image_path {
                    o["image"] = json!(p.to_string_lossy());
                }
                o
            })
            .collect();
        let mesh: Vec<Value> = self
            .mesh_policies
            .iter()
            .map(|p| {
                let mut o = json!({ "caller": p.caller, "callee": p.callee });
                match &p.mode {
                    MeshMode::Passthrough => o["policy"] = json!("passthrough"),
                    MeshMode::Intercept { proxy } => {
                        o["policy"] = json!("intercept");
                        o["proxy"] = json!(proxy);
                    }
                    MeshMode::ElideAfter { proxy, n } => {
                        o["policy"] = json!("elide_after");
                        o["proxy"] = json!(proxy);
                        o["elide_after"] = json!(n);
                    }
                }
                o
            })
            .collect();
        json!({ "services": services, "mesh": mesh, "allowlist": self.allowlist })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("manifest values serialize")
    }
}

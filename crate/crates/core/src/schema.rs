//! Column catalogue: which features exist, how they are typed, which
//! attention group they feed, and the label layout of each suite.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("cannot read schema: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse schema: {0}")]
    Parse(String),
    #[error("duplicate feature name '{0}'")]
    DuplicateName(String),
    #[error("feature '{name}': unknown group '{group}'")]
    UnknownGroup { name: String, group: String },
    #[error("feature '{name}': unknown kind '{kind}'")]
    UnknownKind { name: String, kind: String },
    #[error("schema has no features")]
    Empty,
    #[error("unknown suite '{0}'")]
    UnknownSuite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

/// Semantic grouping of a hardware characteristic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SemanticGroup {
    Memory,
    Workload,
    #[serde(rename = "CPU")]
    Cpu,
    Other,
}

impl SemanticGroup {
    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "memory" => Some(Self::Memory),
            "workload" => Some(Self::Workload),
            "cpu" => Some(Self::Cpu),
            "other" => Some(Self::Other),
            _ => None,
        }
    }
}

/// The four groups the network attends within.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelGroup {
    Char,
    Cpu,
    Other,
    Memory,
}

impl ModelGroup {
    pub const ALL: [ModelGroup; 4] = [ModelGroup::Char, ModelGroup::Cpu, ModelGroup::Other, ModelGroup::Memory];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelGroup::Char => "char",
            ModelGroup::Cpu => "cpu",
            ModelGroup::Other => "other",
            ModelGroup::Memory => "memory",
        }
    }
}

impl fmt::Display for ModelGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub group: SemanticGroup,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl FeatureSpec {
    fn new(name: &str, kind: FeatureKind, group: SemanticGroup, unit: Option<&str>) -> Self {
        FeatureSpec { name: name.to_string(), kind, group, unit: unit.map(str::to_string) }
    }

    /// Categorical features always feed the Char group; numeric ones keep
    /// their semantic group, with numeric workload fields folded into Other.
    pub fn model_group(&self) -> ModelGroup {
        match (self.kind, self.group) {
            (FeatureKind::Categorical, _) => ModelGroup::Char,
            (FeatureKind::Numeric, SemanticGroup::Cpu) => ModelGroup::Cpu,
            (FeatureKind::Numeric, SemanticGroup::Memory) => ModelGroup::Memory,
            (FeatureKind::Numeric, SemanticGroup::Other | SemanticGroup::Workload) => ModelGroup::Other,
        }
    }
}

/// Ordered, validated feature list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct FeatureSchema {
    features: Vec<FeatureSpec>,
}

#[derive(Deserialize)]
struct RawFeature {
    name: String,
    kind: String,
    group: String,
    #[serde(default)]
    unit: Option<String>,
}

const MEMORY_FEATURES: [(&str, Option<&str>); 7] = [
    ("DIMM_rank", None),
    ("Density", Some("Gb")),
    ("DIMM_Num", None),
    ("DIMM_Total", Some("GB")),
    ("DIMM_Freq", Some("MT/s")),
    ("Organization", None),
    ("CL", Some("cycles")),
];

// Only AVX3_TurboFreq, TMUL_P1Freq and Core_per_Socket are known column
// names; the rest are representative placeholders for the
// twenty CPU characteristics.
const CPU_FEATURES: [(&str, Option<&str>); 20] = [
    ("Core_per_Socket", None),
    ("Sockets", None),
    ("Threads_per_Core", None),
    ("CPUs", None),
    ("Base_Freq", Some("GHz")),
    ("Max_Turbo_Freq", Some("GHz")),
    ("All_Core_Turbo_Freq", Some("GHz")),
    ("AVX2_P1Freq", Some("GHz")),
    ("AVX2_TurboFreq", Some("GHz")),
    ("AVX3_P1Freq", Some("GHz")),
    ("AVX3_TurboFreq", Some("GHz")),
    ("TMUL_P1Freq", Some("GHz")),
    ("TMUL_TurboFreq", Some("GHz")),
    ("Uncore_Freq", Some("GHz")),
    ("L1d_Cache", Some("KB")),
    ("L1i_Cache", Some("KB")),
    ("L2_Cache", Some("MB")),
    ("L3_Cache", Some("MB")),
    ("NUMA_Nodes", None),
    ("UPI_Links", None),
];

const OTHER_FEATURES: [(&str, Option<&str>); 2] = [("TDP", Some("W")), ("Power_freq", Some("GHz"))];

const CHAR_FEATURES: [(&str, SemanticGroup); 6] = [
    ("Preset", SemanticGroup::Workload),
    ("OS", SemanticGroup::Other),
    ("Microcode", SemanticGroup::Other),
    ("CPU_Stepping", SemanticGroup::Other),
    ("CPU_Family", SemanticGroup::Other),
    ("Tool", SemanticGroup::Workload),
];

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self, SchemaError> {
        if features.is_empty() {
            return Err(SchemaError::Empty);
        }
        let mut seen = HashSet::new();
        for f in &features {
            if !seen.insert(f.name.as_str()) {
                return Err(SchemaError::DuplicateName(f.name.clone()));
            }
        }
        Ok(FeatureSchema { features })
    }

    /// The 35-column layout: 7 memory, 20 CPU and 2 other numeric
    /// features plus 6 categorical ones.
    pub fn default_schema() -> Self {
        use FeatureKind::*;
        let mut features = Vec::with_capacity(35);
        for (name, unit) in MEMORY_FEATURES {
            features.push(FeatureSpec::new(name, Numeric, SemanticGroup::Memory, unit));
        }
        for (name, unit) in CPU_FEATURES {
            features.push(FeatureSpec::new(name, Numeric, SemanticGroup::Cpu, unit));
        }
        for (name, unit) in OTHER_FEATURES {
            features.push(FeatureSpec::new(name, Numeric, SemanticGroup::Other, unit));
        }
        for (name, group) in CHAR_FEATURES {
            features.push(FeatureSpec::new(name, Categorical, group, None));
        }
        FeatureSchema::new(features).expect("built-in schema is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        if text.trim().is_empty() {
            return Err(SchemaError::Parse("empty schema file".into()));
        }
        let raw: Vec<RawFeature> = serde_json::from_str(text).map_err(|e| SchemaError::Parse(e.to_string()))?;
        let mut features = Vec::with_capacity(raw.len());
        for r in raw {
            let kind = match r.kind.to_ascii_lowercase().as_str() {
                "numeric" => FeatureKind::Numeric,
                "categorical" => FeatureKind::Categorical,
                _ => return Err(SchemaError::UnknownKind { name: r.name, kind: r.kind }),
            };
            let group =
                SemanticGroup::parse(&r.group).ok_or_else(|| SchemaError::UnknownGroup { name: r.name.clone(), group: r.group.clone() })?;
            features.push(FeatureSpec { name: r.name, kind, group, unit: r.unit });
        }
        FeatureSchema::new(features)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.features).expect("schema serializes")
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn count_kind(&self, kind: FeatureKind) -> usize {
        self.features.iter().filter(|f| f.kind == kind).count()
    }

    /// Hex SHA-256 of the canonical JSON rendition.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.features).expect("schema serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

pub fn load_schema(path: &Path) -> Result<FeatureSchema, SchemaError> {
    FeatureSchema::from_json(&std::fs::read_to_string(path)?)
}

/// Feature indices per attention group, in schema order within a group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    groups: [Vec<usize>; 4],
}

impl GroupPartition {
    pub fn indices(&self, group: ModelGroup) -> &[usize] {
        &self.groups[group.index()]
    }

    pub fn len(&self, group: ModelGroup) -> usize {
        self.groups[group.index()].len()
    }

    pub fn non_empty(&self) -> impl Iterator<Item = (ModelGroup, &[usize])> {
        ModelGroup::ALL.into_iter().map(|g| (g, self.indices(g))).filter(|(_, ix)| !ix.is_empty())
    }

    /// Numeric groups in model order (Cpu, Other, Memory).
    pub fn numeric_groups(&self) -> impl Iterator<Item = (ModelGroup, &[usize])> {
        ModelGroup::ALL[1..].iter().map(|&g| (g, self.indices(g)))
    }
}

pub fn group_partition(schema: &FeatureSchema) -> GroupPartition {
    let mut groups: [Vec<usize>; 4] = Default::default();
    for (i, f) in schema.features().iter().enumerate() {
        groups[f.model_group().index()].push(i);
    }
    GroupPartition { groups }
}

/// Label layout of one benchmark suite; benchmark order is fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub name: String,
    pub benchmarks: Vec<String>,
}

const SPEC_INT: [&str; 11] = [
    "500.perlbench_r",
    "502.gcc_r",
    "505.mcf_r",
    "520.omnetpp_r",
    "523.xalancbmk_r",
    "525.x264_r",
    "531.deepsjeng_r",
    "541.leela_r",
    "548.exchange2_r",
    "557.xz_r",
    "SPECrate2017_int_base",
];

const SPEC_FP: [&str; 14] = [
    "503.bwaves_r",
    "507.cactuBSSN_r",
    "508.namd_r",
    "510.parest_r",
    "511.povray_r",
    "519.lbm_r",
    "521.wrf_r",
    "526.blender_r",
    "527.cam4_r",
    "538.imagick_r",
    "544.nab_r",
    "549.fotonik3d_r",
    "554.roms_r",
    "SPECrate2017_fp_base",
];

const MLC_LATENCY: [&str; 9] = [
    "l1_hit",
    "l2_hit",
    "l3_hit_local",
    "l3_hit_remote",
    "dram_local",
    "dram_remote",
    "dram_local_numa0",
    "dram_local_numa1",
    "idle_latency",
];

const MLC_BANDWIDTH: [&str; 9] = [
    "l3_max_bandwidth",
    "all_reads",
    "3r1w",
    "2r1w",
    "1r1w",
    "stream_triad_like",
    "local_socket_reads",
    "remote_socket_reads",
    "remote_socket_2r1w",
];

const STREAM: [&str; 4] = ["Copy", "Scale", "Sum", "Triad"];

impl SuiteSpec {
    pub fn new(name: impl Into<String>, benchmarks: Vec<String>) -> Self {
        SuiteSpec { name: name.into(), benchmarks }
    }

    fn from_static(name: &str, benchmarks: &[&str]) -> Self {
        SuiteSpec::new(name, benchmarks.iter().map(|s| s.to_string()).collect())
    }

    pub fn output_dim(&self) -> usize {
        self.benchmarks.len()
    }

    pub fn benchmark_index(&self, name: &str) -> Option<usize> {
        self.benchmarks.iter().position(|b| b == name)
    }

    pub fn builtin() -> Vec<SuiteSpec> {
        vec![
            Self::from_static("SPECrate2017_int_base", &SPEC_INT),
            Self::from_static("SPECrate2017_fp_base", &SPEC_FP),
            Self::from_static("MLC_Latency", &MLC_LATENCY),
            Self::from_static("MLC_Bandwidth", &MLC_BANDWIDTH),
            Self::from_static("Stream", &STREAM),
            Self::from_static("HPCG", &["HPCG"]),
        ]
    }

    /// Built-in suite by name; spaces and case are ignored.
    pub fn by_name(name: &str) -> Result<SuiteSpec, SchemaError> {
        let norm = |s: &str| s.replace([' ', '_'], "").to_ascii_lowercase();
        let wanted = norm(name);
        Self::builtin().into_iter().find(|s| norm(&s.name) == wanted).ok_or_else(|| SchemaError::UnknownSuite(name.to_string()))
    }

    /// Column name used for a benchmark's label in consolidated files.
    pub fn label_column(&self, benchmark: &str) -> String {
        format!("{}::{}", self.name, benchmark)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_counts() {
        let s = FeatureSchema::default_schema();
        assert_eq!(s.len(), 35);
        let p = group_partition(&s);
        assert_eq!(p.len(ModelGroup::Memory), 7);
        assert_eq!(p.len(ModelGroup::Cpu), 20);
        assert_eq!(p.len(ModelGroup::Other), 2);
        assert_eq!(p.len(ModelGroup::Char), 6);
        assert_eq!(s.count_kind(FeatureKind::Categorical), 6);
    }

    #[test]
    fn partition_is_complete_and_disjoint() {
        let s = FeatureSchema::default_schema();
        let p = group_partition(&s);
        let mut all: Vec<usize> = ModelGroup::ALL.iter().flat_map(|&g| p.indices(g).to_vec()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..35).collect::<Vec<_>>());
    }

    #[test]
    fn single_feature_partition() {
        let s = FeatureSchema::new(vec![FeatureSpec::new("TDP", FeatureKind::Numeric, SemanticGroup::Other, None)]).unwrap();
        let groups: Vec<_> = group_partition(&s).non_empty().map(|(g, ix)| (g, ix.to_vec())).collect();
        assert_eq!(groups, vec![(ModelGroup::Other, vec![0])]);
    }

    #[test]
    fn shuffled_schema_gives_same_partition_by_name() {
        let s = FeatureSchema::default_schema();
        let mut feats = s.features().to_vec();
        feats.reverse();
        feats.swap(3, 17);
        let shuffled = FeatureSchema::new(feats).unwrap();
        let names = |schema: &FeatureSchema, g: ModelGroup| {
            let p = group_partition(schema);
            let mut v: Vec<String> = p.indices(g).iter().map(|&i| schema.features()[i].name.clone()).collect();
            v.sort();
            v
        };
        for g in ModelGroup::ALL {
            assert_eq!(names(&s, g), names(&shuffled, g));
        }
    }

    #[test]
    fn json_round_trip_and_errors() {
        let s = FeatureSchema::default_schema();
        let back = FeatureSchema::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());

        let dup = r#"[{"name":"TDP","kind":"numeric","group":"Other"},{"name":"TDP","kind":"numeric","group":"Other"}]"#;
        assert!(matches!(FeatureSchema::from_json(dup), Err(SchemaError::DuplicateName(n)) if n == "TDP"));
        assert!(matches!(FeatureSchema::from_json(""), Err(SchemaError::Parse(_))));
        let bad_group = r#"[{"name":"x","kind":"numeric","group":"GPU"}]"#;
        assert!(matches!(FeatureSchema::from_json(bad_group), Err(SchemaError::UnknownGroup { .. })));
        let bad_kind = r#"[{"name":"x","kind":"ordinal","group":"CPU"}]"#;
        assert!(matches!(FeatureSchema::from_json(bad_kind), Err(SchemaError::UnknownKind { .. })));
    }

    #[test]
    fn suite_dimensions() {
        let dims: Vec<(String, usize)> = SuiteSpec::builtin().into_iter().map(|s| (s.name.clone(), s.output_dim())).collect();
        let expected = [
            ("SPECrate2017_int_base", 11),
            ("SPECrate2017_fp_base", 14),
            ("MLC_Latency", 9),
            ("MLC_Bandwidth", 9),
            ("Stream", 4),
            ("HPCG", 1),
        ];
        for ((name, dim), (en, ed)) in dims.iter().zip(expected) {
            assert_eq!((name.as_str(), *dim), (en, ed));
        }
        assert_eq!(SuiteSpec::by_name("MLC Latency").unwrap().output_dim(), 9);
        assert!(SuiteSpec::by_name("nope").is_err());
    }
}

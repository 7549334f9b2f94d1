//! Payload backends: annotated fixed-size records for stream storage and an
//! integer-keyed heap for variable-size data.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StorageError {
    #[error("unknown field `{entity}.{name}`")]
    UnknownField { entity: String, name: String },
    #[error("field `{entity}.{name}` registered twice with different annotations")]
    ConflictingField { entity: String, name: String },
    #[error("heap key {0:#x} is not live")]
    StaleKey(u64),
    #[error("heap key {0:#x} is already in use")]
    KeyInUse(u64),
    #[error("patch halo must be at least 1")]
    NoHalo,
    #[error("expected {expected} values, got {found}")]
    Length { expected: usize, found: usize },
    #[error("malformed manifest line `{0}`")]
    Manifest(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FieldType {
    F64,
    I64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Persistence {
    /// Carried from one traversal to the next.
    Persistent,
    /// Reset to zero whenever the entity is loaded.
    Discard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Exchange {
    /// Included in copies sent to other ranks.
    Parallelise,
    Local,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FieldSpec {
    pub name: String,
    pub ty: FieldType,
    pub persistence: Persistence,
    pub exchange: Exchange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FieldId(pub(crate) usize);

impl FieldId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Registered fields of one entity kind.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Schema {
    entity: String,
    fields: Vec<FieldSpec>,
}

impl Schema {
    pub fn new(entity: &str) -> Self {
        Schema { entity: entity.to_string(), fields: Vec::new() }
    }

    pub fn entity(&self) -> &str {
        &self.entity
    }

    /// Registers a field, returning the existing id if an identical field exists.
    pub fn register(
        &mut self,
        name: &str,
        ty: FieldType,
        persistence: Persistence,
        exchange: Exchange,
    ) -> Result<FieldId, StorageError> {
        let spec = FieldSpec { name: name.to_string(), ty, persistence, exchange };
        if let Some(i) = self.fields.iter().position(|f| f.name == name) {
            if self.fields[i] != spec {
                return Err(StorageError::ConflictingField { entity: self.entity.clone(), name: name.to_string() });
            }
            return Ok(FieldId(i));
        }
        self.fields.push(spec);
        Ok(FieldId(self.fields.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<FieldId, StorageError> {
        self.fields
            .iter()
            .position(|f| f.name == name)
            .map(FieldId)
            .ok_or_else(|| StorageError::UnknownField { entity: self.entity.clone(), name: name.to_string() })
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn spec(&self, id: FieldId) -> &FieldSpec {
        &self.fields[id.0]
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn record_bytes(&self) -> usize {
        8 * self.fields.len()
    }

    pub fn default_record(&self) -> Record {
        Record { bits: vec![0; self.fields.len()] }
    }

    pub fn reset_discard(&self, record: &mut Record) {
        for (i, f) in self.fields.iter().enumerate() {
            if f.persistence == Persistence::Discard {
                record.bits[i] = 0;
            }
        }
    }

    /// Copy holding only `Parallelise` fields; local fields are zero.
    pub fn exchange_copy(&self, record: &Record) -> Record {
        let mut out = self.default_record();
        for (i, f) in self.fields.iter().enumerate() {
            if f.exchange == Exchange::Parallelise {
                out.bits[i] = record.bits[i];
            }
        }
        out
    }

    /// Lines of the form `entity.field: type persistence exchange`.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for f in &self.fields {
            let ty = match f.ty {
                FieldType::F64 => "f64",
                FieldType::I64 => "i64",
            };
            let p = match f.persistence {
                Persistence::Persistent => "persistent",
                Persistence::Discard => "discard",
            };
            let e = match f.exchange {
                Exchange::Parallelise => "parallelise",
                Exchange::Local => "local",
            };
            out.push_str(&format!("{}.{}: {ty} {p} {e}\n", self.entity, f.name));
        }
        out
    }
}

/// Schemas of all three record kinds a traversal handles.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    pub vertex: Schema,
    pub cell: Schema,
    pub state: Schema,
}

impl Default for Layout {
    fn default() -> Self {
        Layout { vertex: Schema::new("vertex"), cell: Schema::new("cell"), state: Schema::new("state") }
    }
}

impl Layout {
    pub fn manifest(&self) -> String {
        format!("{}{}{}", self.vertex.manifest(), self.cell.manifest(), self.state.manifest())
    }

    /// Inverse of [`Layout::manifest`].
    pub fn from_manifest(text: &str) -> Result<Self, StorageError> {
        let mut layout = Layout::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let bad = || StorageError::Manifest(line.to_string());
            let (path, rest) = line.split_once(':').ok_or_else(bad)?;
            let (entity, name) = path.split_once('.').ok_or_else(bad)?;
            let words: Vec<&str> = rest.split_whitespace().collect();
            if words.len() != 3 {
                return Err(bad());
            }
            let ty = match words[0] {
                "f64" => FieldType::F64,
                "i64" => FieldType::I64,
                _ => return Err(bad()),
            };
            let persistence = match words[1] {
                "persistent" => Persistence::Persistent,
                "discard" => Persistence::Discard,
                _ => return Err(bad()),
            };
            let exchange = match words[2] {
                "parallelise" => Exchange::Parallelise,
                "local" => Exchange::Local,
                _ => return Err(bad()),
            };
            let schema = match entity {
                "vertex" => &mut layout.vertex,
                "cell" => &mut layout.cell,
                "state" => &mut layout.state,
                _ => return Err(bad()),
            };
            schema.register(name, ty, persistence, exchange)?;
        }
        Ok(layout)
    }

    /// True if every schema of `self` is a prefix of the matching schema of `other`.
    pub fn is_prefix_of(&self, other: &Layout) -> bool {
        let prefix = |a: &Schema, b: &Schema| a.fields.len() <= b.fields.len() && a.fields == b.fields[..a.fields.len()];
        prefix(&self.vertex, &other.vertex) && prefix(&self.cell, &other.cell) && prefix(&self.state, &other.state)
    }
}

/// Fixed-size payload; every field occupies one 64-bit slot.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Record {
    bits: Vec<u64>,
}

impl Record {
    pub fn from_bits(bits: Vec<u64>) -> Self {
        Record { bits }
    }

    pub fn bits(&self) -> &[u64] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn f64(&self, id: FieldId) -> f64 {
        f64::from_bits(self.bits[id.0])
    }

    pub fn set_f64(&mut self, id: FieldId, value: f64) {
        self.bits[id.0] = value.to_bits();
    }

    pub fn add_f64(&mut self, id: FieldId, value: f64) {
        self.set_f64(id, self.f64(id) + value);
    }

    pub fn i64(&self, id: FieldId) -> i64 {
        self.bits[id.0] as i64
    }

    pub fn set_i64(&mut self, id: FieldId, value: i64) {
        self.bits[id.0] = value as u64;
    }

    pub fn add_i64(&mut self, id: FieldId, value: i64) {
        self.set_i64(id, self.i64(id).wrapping_add(value));
    }
}

impl fmt::Debug for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Record{:x?}", self.bits)
    }
}

/// Access to the payload record of an entity.
pub trait HasRecord {
    fn record(&self) -> &Record;
    fn record_mut(&mut self) -> &mut Record;
}

impl HasRecord for Record {
    fn record(&self) -> &Record {
        self
    }

    fn record_mut(&mut self) -> &mut Record {
        self
    }
}

/// Values of one field across entities, in slice order.
pub fn gather<T: HasRecord>(items: &[T], field: FieldId) -> Vec<f64> {
    items.iter().map(|v| v.record().f64(field)).collect()
}

/// Adds `values[i]` to the field of `items[i]`.
pub fn scatter_add<T: HasRecord>(items: &mut [T], field: FieldId, values: &[f64]) -> Result<(), StorageError> {
    if values.len() != items.len() {
        return Err(StorageError::Length { expected: items.len(), found: values.len() });
    }
    for (v, x) in items.iter_mut().zip(values) {
        v.record_mut().add_f64(field, *x);
    }
    Ok(())
}

pub fn gather_named<T: HasRecord>(schema: &Schema, items: &[T], name: &str) -> Result<Vec<f64>, StorageError> {
    Ok(gather(items, schema.id(name)?))
}

pub fn scatter_named<T: HasRecord>(
    schema: &Schema,
    items: &mut [T],
    name: &str,
    values: &[f64],
) -> Result<(), StorageError> {
    scatter_add(items, schema.id(name)?, values)
}

const ISSUED_KEY_BIT: u64 = 1 << 63;

/// Variable-size blocks addressed by 64-bit keys.
///
/// Keys are either framework-issued handles (top bit set) or caller supplied,
/// typically [`crate::sfc::CellCode::heap_key`].
#[derive(Clone, Debug, Default)]
pub struct Heap {
    blocks: HashMap<u64, Vec<f64>>,
    next: u64,
}

impl Heap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&mut self, size: usize) -> u64 {
        let key = ISSUED_KEY_BIT | self.next;
        self.next += 1;
        self.blocks.insert(key, vec![0.0; size]);
        key
    }

    pub fn insert(&mut self, key: u64, block: Vec<f64>) -> Result<(), StorageError> {
        if self.blocks.contains_key(&key) {
            return Err(StorageError::KeyInUse(key));
        }
        self.blocks.insert(key, block);
        Ok(())
    }

    pub fn get(&self, key: u64) -> Result<&[f64], StorageError> {
        self.blocks.get(&key).map(Vec::as_slice).ok_or(StorageError::StaleKey(key))
    }

    pub fn get_mut(&mut self, key: u64) -> Result<&mut Vec<f64>, StorageError> {
        self.blocks.get_mut(&key).ok_or(StorageError::StaleKey(key))
    }

    pub fn delete(&mut self, key: u64) -> Result<Vec<f64>, StorageError> {
        self.blocks.remove(&key).ok_or(StorageError::StaleKey(key))
    }

    pub fn contains(&self, key: u64) -> bool {
        self.blocks.contains_key(&key)
    }

    pub fn live(&self) -> usize {
        self.blocks.len()
    }

    pub fn keys(&self) -> Vec<u64> {
        let mut keys: Vec<u64> = self.blocks.keys().copied().collect();
        keys.sort_unstable();
        keys
    }
}

/// Shape of a regular patch of `n^d` unknowns with a halo of width `halo`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    dim: usize,
    n: usize,
    halo: usize,
}

impl PatchLayout {
    pub fn new(dim: usize, n: usize, halo: usize) -> Result<Self, StorageError> {
        if halo == 0 {
            return Err(StorageError::NoHalo);
        }
        Ok(PatchLayout { dim, n, halo })
    }

    pub fn width(&self) -> usize {
        self.n + 2 * self.halo
    }

    pub fn len(&self) -> usize {
        self.width().pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index of `at`, whose entries range over `-halo .. n + halo`.
    pub fn index(&self, at: &[i64]) -> Option<usize> {
        let h = self.halo as i64;
        let w = self.width() as i64;
        let mut idx = 0i64;
        for &c in at.iter().rev() {
            if c < -h || c >= self.n as i64 + h {
                return None;
            }
            idx = idx * w + (c + h);
        }
        Some(idx as usize)
    }

    pub fn is_halo(&self, at: &[i64]) -> bool {
        at.iter().any(|&c| c < 0 || c >= self.n as i64)
    }

    /// Allocates a zeroed patch on the heap under `key`.
    pub fn allocate(&self, heap: &mut Heap, key: u64) -> Result<(), StorageError> {
        heap.insert(key, vec![0.0; self.len()])
    }
}

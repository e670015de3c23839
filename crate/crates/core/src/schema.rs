//! Column-level schema algebra: diffing two schema versions and classifying
//! the resulting drift as backward-compatible or incompatible.
//!
//! Compatibility follows a fixed table:
//!
//! | change                                   | class        |
//! |------------------------------------------|--------------|
//! | add nullable column                      | compatible   |
//! | add non-nullable column                  | incompatible |
//! | widen type (int32→int64, int32/int64→float64) | compatible |
//! | any other type change                    | incompatible |
//! | non-nullable → nullable                  | compatible   |
//! | nullable → non-nullable                  | incompatible |
//! | drop column                              | incompatible |
//! | rename column                            | incompatible |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scalar column types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Int32,
    Int64,
    Float64,
    String,
    Bool,
    Timestamp,
}

impl DataType {
    pub const ALL: [DataType; 6] = [
        DataType::Int32,
        DataType::Int64,
        DataType::Float64,
        DataType::String,
        DataType::Bool,
        DataType::Timestamp,
    ];

    /// True when every value of `self` is readable as `to` without loss of meaning.
    pub fn widens_to(self, to: DataType) -> bool {
        matches!(
            (self, to),
            (DataType::Int32, DataType::Int64)
                | (DataType::Int32, DataType::Float64)
                | (DataType::Int64, DataType::Float64)
        )
    }

    /// Reverse of [`DataType::widens_to`].
    pub fn narrows_to(self, to: DataType) -> bool {
        to.widens_to(self)
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DataType::Int32 => "int32",
            DataType::Int64 => "int64",
            DataType::Float64 => "float64",
            DataType::String => "string",
            DataType::Bool => "bool",
            DataType::Timestamp => "timestamp",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Column {
    pub name: String,
    pub dtype: DataType,
    #[serde(default)]
    pub nullable: bool,
    /// Former names of this column. A column whose alias matches a dropped
    /// column of the previous version is reported as a rename.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

impl Column {
    pub fn new(name: impl Into<String>, dtype: DataType, nullable: bool) -> Self {
        Self {
            name: name.into(),
            dtype,
            nullable,
            aliases: Vec::new(),
        }
    }

    pub fn with_alias(mut self, alias: impl Into<String>) -> Self {
        self.aliases.push(alias.into());
        self
    }

    fn same_shape(&self, other: &Column) -> bool {
        self.name == other.name && self.dtype == other.dtype && self.nullable == other.nullable
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("schema version must be >= 1")]
    ZeroVersion,
    #[error("column name must be non-empty")]
    EmptyName,
    #[error("change `{change}` does not apply: {reason}")]
    Inapplicable { change: String, reason: String },
}

/// An ordered list of columns with a version number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub version: u32,
    pub columns: Vec<Column>,
}

impl Schema {
    pub fn new(version: u32, columns: Vec<Column>) -> Result<Self, SchemaError> {
        let schema = Self { version, columns };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.version == 0 {
            return Err(SchemaError::ZeroVersion);
        }
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if c.name.is_empty() {
                return Err(SchemaError::EmptyName);
            }
            if !seen.insert(c.name.as_str()) {
                return Err(SchemaError::DuplicateColumn(c.name.clone()));
            }
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Column-for-column equality ignoring version and alias metadata.
    pub fn same_shape(&self, other: &Schema) -> bool {
        self.columns.len() == other.columns.len()
            && self
                .columns
                .iter()
                .zip(&other.columns)
                .all(|(a, b)| a.same_shape(b))
    }
}

/// One column-level difference between two schema versions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Change {
    /// `position` is the column's index in the new schema.
    AddColumn {
        column: Column,
        position: usize,
    },
    DropColumn {
        name: String,
    },
    RenameColumn {
        from: String,
        to: String,
    },
    ChangeType {
        name: String,
        from: DataType,
        to: DataType,
    },
    ChangeNullability {
        name: String,
        from: bool,
        to: bool,
    },
}

impl Change {
    /// Whether this change alone keeps existing consumers working.
    pub fn is_backward_compatible(&self) -> bool {
        match self {
            Change::AddColumn { column, .. } => column.nullable,
            Change::DropColumn { .. } | Change::RenameColumn { .. } => false,
            Change::ChangeType { from, to, .. } => from.widens_to(*to),
            Change::ChangeNullability { from, to, .. } => !from && *to,
        }
    }
}

impl fmt::Display for Change {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Change::AddColumn { column, position } => write!(
                f,
                "AddColumn({}:{}{} @{})",
                column.name,
                column.dtype,
                if column.nullable { " nullable" } else { "" },
                position
            ),
            Change::DropColumn { name } => write!(f, "DropColumn({name})"),
            Change::RenameColumn { from, to } => write!(f, "RenameColumn({from},{to})"),
            Change::ChangeType { name, from, to } => write!(f, "ChangeType({name},{from},{to})"),
            Change::ChangeNullability { name, from, to } => {
                write!(f, "ChangeNullability({name},{from},{to})")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SchemaDelta {
    pub changes: Vec<Change>,
}

impl SchemaDelta {
    pub fn new(changes: Vec<Change>) -> Self {
        Self { changes }
    }

    pub fn is_empty(&self) -> bool {
        self.changes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum DriftClass {
    NoDrift,
    BackwardCompatible,
    /// Carries every offending change, never empty.
    Incompatible {
        reasons: Vec<Change>,
    },
}

impl DriftClass {
    pub fn is_incompatible(&self) -> bool {
        matches!(self, DriftClass::Incompatible { .. })
    }
}

/// Minimal change list turning `old` into `new`.
///
/// Columns are matched by name, or by a declared alias on the new column.
/// Kept columns that moved relative to each other cannot be expressed in
/// place, so the fewest of them needed to restore order are reported as a
/// drop followed by an add.
pub fn schema_delta(old: &Schema, new: &Schema) -> SchemaDelta {
    let new_names: BTreeSet<&str> = new.columns.iter().map(|c| c.name.as_str()).collect();

    // new index -> old index
    let mut matched: BTreeMap<usize, usize> = BTreeMap::new();
    let mut used_old = BTreeSet::new();
    for (ni, nc) in new.columns.iter().enumerate() {
        if let Some(oi) = old.position(&nc.name) {
            matched.insert(ni, oi);
            used_old.insert(oi);
        }
    }
    for (ni, nc) in new.columns.iter().enumerate() {
        if matched.contains_key(&ni) {
            continue;
        }
        let renamed_from = nc.aliases.iter().find_map(|alias| {
            let oi = old.position(alias)?;
            (!used_old.contains(&oi) && !new_names.contains(alias.as_str())).then_some(oi)
        });
        if let Some(oi) = renamed_from {
            matched.insert(ni, oi);
            used_old.insert(oi);
        }
    }

    // Keep the longest run of matched columns already in old order.
    let order: Vec<(usize, usize)> = matched.iter().map(|(&n, &o)| (n, o)).collect();
    let keep: BTreeSet<usize> = longest_increasing_by_old(&order).into_iter().collect();
    let kept_old: BTreeMap<usize, usize> = order
        .iter()
        .filter(|(n, _)| keep.contains(n))
        .map(|&(n, o)| (o, n))
        .collect();

    let mut changes = Vec::new();
    for (oi, oc) in old.columns.iter().enumerate() {
        let Some(&ni) = kept_old.get(&oi) else {
            changes.push(Change::DropColumn {
                name: oc.name.clone(),
            });
            continue;
        };
        let nc = &new.columns[ni];
        if nc.name != oc.name {
            changes.push(Change::RenameColumn {
                from: oc.name.clone(),
                to: nc.name.clone(),
            });
        }
        if nc.dtype != oc.dtype {
            changes.push(Change::ChangeType {
                name: nc.name.clone(),
                from: oc.dtype,
                to: nc.dtype,
            });
        }
        if nc.nullable != oc.nullable {
            changes.push(Change::ChangeNullability {
                name: nc.name.clone(),
                from: oc.nullable,
                to: nc.nullable,
            });
        }
    }
    for (ni, nc) in new.columns.iter().enumerate() {
        if !keep.contains(&ni) {
            changes.push(Change::AddColumn {
                column: nc.clone(),
                position: ni,
            });
        }
    }
    SchemaDelta { changes }
}

/// Indices (new-side) of the longest subsequence whose old indices increase.
fn longest_increasing_by_old(pairs: &[(usize, usize)]) -> Vec<usize> {
    let n = pairs.len();
    if n == 0 {
        return Vec::new();
    }
    let mut len = vec![1usize; n];
    let mut prev = vec![usize::MAX; n];
    for i in 0..n {
        for j in 0..i {
            if pairs[j].1 < pairs[i].1 && len[j] + 1 > len[i] {
                len[i] = len[j] + 1;
                prev[i] = j;
            }
        }
    }
    let mut best = 0;
    for i in 1..n {
        if len[i] > len[best] {
            best = i;
        }
    }
    let mut out = Vec::new();
    let mut cur = best;
    while cur != usize::MAX {
        out.push(pairs[cur].0);
        cur = prev[cur];
    }
    out.reverse();
    out
}

/// Classify a delta. Every incompatible change is listed in the reasons.
pub fn classify_delta(delta: &SchemaDelta) -> DriftClass {
    if delta.is_empty() {
        return DriftClass::NoDrift;
    }
    let reasons: Vec<Change> = delta
        .changes
        .iter()
        .filter(|c| !c.is_backward_compatible())
        .cloned()
        .collect();
    if reasons.is_empty() {
        DriftClass::BackwardCompatible
    } else {
        DriftClass::Incompatible { reasons }
    }
}

/// Apply `delta` to `old`, producing the next version.
///
/// In-place edits (rename, type, nullability) go first, then drops, then
/// additions in ascending target position.
pub fn apply_delta(old: &Schema, delta: &SchemaDelta) -> Result<Schema, SchemaError> {
    let inapplicable = |c: &Change, reason: &str| SchemaError::Inapplicable {
        change: c.to_string(),
        reason: reason.to_string(),
    };
    let mut cols = old.columns.clone();
    let mut drops = Vec::new();
    let mut adds = Vec::new();
    for change in &delta.changes {
        match change {
            Change::RenameColumn { from, to } => {
                if cols.iter().any(|c| &c.name == to) {
                    return Err(inapplicable(change, "target name exists"));
                }
                let col = cols
                    .iter_mut()
                    .find(|c| &c.name == from)
                    .ok_or_else(|| inapplicable(change, "no such column"))?;
                col.name = to.clone();
                col.aliases = vec![from.clone()];
            }
            Change::ChangeType { name, from, to } => {
                let col = cols
                    .iter_mut()
                    .find(|c| &c.name == name)
                    .ok_or_else(|| inapplicable(change, "no such column"))?;
                if col.dtype != *from {
                    return Err(inapplicable(change, "type mismatch"));
                }
                col.dtype = *to;
            }
            Change::ChangeNullability { name, from, to } => {
                let col = cols
                    .iter_mut()
                    .find(|c| &c.name == name)
                    .ok_or_else(|| inapplicable(change, "no such column"))?;
                if col.nullable != *from {
                    return Err(inapplicable(change, "nullability mismatch"));
                }
                col.nullable = *to;
            }
            Change::DropColumn { name } => drops.push((change, name)),
            Change::AddColumn { column, position } => adds.push((change, column, *position)),
        }
    }
    for (change, name) in drops {
        let pos = cols
            .iter()
            .position(|c| &c.name == name)
            .ok_or_else(|| inapplicable(change, "no such column"))?;
        cols.remove(pos);
    }
    adds.sort_by_key(|(_, _, p)| *p);
    for (change, column, position) in adds {
        if position > cols.len() {
            return Err(inapplicable(change, "position out of range"));
        }
        cols.insert(position, column.clone());
    }
    Schema::new(old.version + 1, cols)
}

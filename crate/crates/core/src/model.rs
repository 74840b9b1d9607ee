//! Skeleton model: kinematic tree, joints, marker sites, scale map and
//! equality constraints, plus the line-oriented text format they are read from.
//!
//! ```text
//! # comment
//! body <name> parent=<name|none> offset=<x,y,z>
//! joint <body> kind=<free|hinge|ball> [axis=<x,y,z>] [range=<lo,hi>]
//! site <name> body=<body> pos=<x,y,z>
//! scale <name> bodies=<b1,b2,...|*>
//! constraint <dofA> <dofB> ratio=<r> offset=<o>
//! ```
//!
//! Bodies must be declared after their parent. Pose coordinates are numbered in
//! joint declaration order; a free joint contributes `tx ty tz rx ry rz`, a ball
//! joint an axis-angle triple and a hinge a single angle. The first declared
//! scale is the overall size and applies to every body.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{element}: {message}")]
    Semantic { element: String, message: String },
    #[error("scale parameter {index} is not positive ({value})")]
    NonPositiveScale { index: usize, value: f64 },
    #[error("expected {expected} scale parameters, got {actual}")]
    ScaleCount { expected: usize, actual: usize },
}

fn semantic(element: impl Into<String>, message: impl Into<String>) -> ModelError {
    ModelError::Semantic {
        element: element.into(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodySegment {
    pub name: String,
    pub parent: Option<usize>,
    /// Attachment point in the parent frame, meters, unscaled.
    pub attach_offset: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JointKind {
    Free,
    Hinge,
    Ball,
}

impl JointKind {
    pub fn dof(self) -> usize {
        match self {
            JointKind::Free => 6,
            JointKind::Hinge => 1,
            JointKind::Ball => 3,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            JointKind::Free => "free",
            JointKind::Hinge => "hinge",
            JointKind::Ball => "ball",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointDef {
    pub body: usize,
    pub kind: JointKind,
    /// Unit rotation axis (hinge only).
    pub axis: Option<[f64; 3]>,
    /// Limits of each rotational coordinate, radians.
    pub range: Option<(f64, f64)>,
    /// First pose coordinate owned by this joint.
    pub dof_start: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteDef {
    pub name: String,
    pub body: usize,
    /// Position in the body frame, meters, unscaled.
    pub local_pos: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleMap {
    pub names: Vec<String>,
    /// `assignment[b]` lists the scale parameters multiplying body `b`.
    pub assignment: Vec<Vec<usize>>,
}

impl ScaleMap {
    pub fn n_scales(&self) -> usize {
        self.names.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualityConstraint {
    pub dof_a: usize,
    pub dof_b: usize,
    pub ratio: f64,
    pub offset: f64,
}

/// Per-coordinate squashing bounds: `None` for unbounded coordinates.
pub type DofLimits = Vec<Option<(f64, f64)>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonModel {
    pub bodies: Vec<BodySegment>,
    pub joints: Vec<JointDef>,
    pub sites: Vec<SiteDef>,
    pub scale_map: ScaleMap,
    pub constraints: Vec<EqualityConstraint>,
    pub n_dof: usize,
}

/// The shared subject parameters: segment scales plus per-site offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    pub scales: Vec<f64>,
    /// Body-frame offsets, meters, one row per site.
    pub site_offsets: Vec<[f64; 3]>,
}

impl SubjectParams {
    /// Unit scales and zero offsets.
    pub fn neutral(model: &SkeletonModel) -> Self {
        Self {
            scales: vec![1.0; model.scale_map.n_scales()],
            site_offsets: vec![[0.0; 3]; model.sites.len()],
        }
    }

    /// Length of the flattened parameter vector, `n_scales + 3 J`.
    pub fn len(&self) -> usize {
        self.scales.len() + 3 * self.site_offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, model: &SkeletonModel) -> Result<(), ModelError> {
        if self.scales.len() != model.scale_map.n_scales() {
            return Err(ModelError::ScaleCount {
                expected: model.scale_map.n_scales(),
                actual: self.scales.len(),
            });
        }
        if self.site_offsets.len() != model.sites.len() {
            return Err(semantic(
                "subject",
                format!(
                    "{} site offsets for a model with {} sites",
                    self.site_offsets.len(),
                    model.sites.len()
                ),
            ));
        }
        for (index, &value) in self.scales.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ModelError::NonPositiveScale { index, value });
            }
        }
        Ok(())
    }
}

impl SkeletonModel {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn body_index(&self, name: &str) -> Option<usize> {
        self.bodies.iter().position(|b| b.name == name)
    }

    pub fn site_index(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.name == name)
    }

    pub fn site_names(&self) -> Vec<String> {
        self.sites.iter().map(|s| s.name.clone()).collect()
    }

    /// Joints attached to body `b`, in declaration order.
    pub fn joints_of(&self, b: usize) -> impl Iterator<Item = &JointDef> {
        self.joints.iter().filter(move |j| j.body == b)
    }

    /// Squashing limits for each pose coordinate.
    pub fn dof_limits(&self) -> DofLimits {
        let mut limits = vec![None; self.n_dof];
        for j in &self.joints {
            match j.kind {
                JointKind::Free => {}
                JointKind::Hinge | JointKind::Ball => {
                    for k in 0..j.kind.dof() {
                        limits[j.dof_start + k] = j.range;
                    }
                }
            }
        }
        limits
    }

    /// Pose coordinates that belong to hinge joints.
    pub fn hinge_dofs(&self) -> Vec<usize> {
        self.joints
            .iter()
            .filter(|j| j.kind == JointKind::Hinge)
            .map(|j| j.dof_start)
            .collect()
    }

    /// Human-readable label of pose coordinate `dof`, e.g. `femur_r:hinge1`.
    pub fn dof_label(&self, dof: usize) -> String {
        for (ji, j) in self.joints.iter().enumerate() {
            if dof >= j.dof_start && dof < j.dof_start + j.kind.dof() {
                let body = &self.bodies[j.body].name;
                let k = dof - j.dof_start;
                return match j.kind {
                    JointKind::Free => {
                        format!("{body}:{}", ["tx", "ty", "tz", "rx", "ry", "rz"][k])
                    }
                    JointKind::Ball => format!("{body}:ball{ji}.{}", ["x", "y", "z"][k]),
                    JointKind::Hinge => format!("{body}:hinge{ji}"),
                };
            }
        }
        format!("dof{dof}")
    }

    /// Multiplicative scale factor of every body: the product of its assigned parameters.
    pub fn body_scales(&self, scales: &[f64]) -> Result<Vec<f64>, ModelError> {
        if scales.len() != self.scale_map.n_scales() {
            return Err(ModelError::ScaleCount {
                expected: self.scale_map.n_scales(),
                actual: scales.len(),
            });
        }
        for (index, &value) in scales.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ModelError::NonPositiveScale { index, value });
            }
        }
        Ok(self
            .scale_map
            .assignment
            .iter()
            .map(|params| params.iter().map(|&k| scales[k]).product())
            .collect())
    }

    /// Writes the model back out in the text format accepted by [`parse_model`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let v3 = |v: &[f64; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        for b in &self.bodies {
            let parent = b.parent.map_or("none", |p| self.bodies[p].name.as_str());
            let _ = writeln!(out, "body {} parent={} offset={}", b.name, parent, v3(&b.attach_offset));
        }
        for j in &self.joints {
            let _ = write!(out, "joint {} kind={}", self.bodies[j.body].name, j.kind.as_str());
            if let Some(axis) = &j.axis {
                let _ = write!(out, " axis={}", v3(axis));
            }
            if let Some((lo, hi)) = j.range {
                let _ = write!(out, " range={lo},{hi}");
            }
            out.push('\n');
        }
        for s in &self.sites {
            let _ = writeln!(
                out,
                "site {} body={} pos={}",
                s.name,
                self.bodies[s.body].name,
                v3(&s.local_pos)
            );
        }
        for (k, name) in self.scale_map.names.iter().enumerate() {
            if k == 0 {
                let _ = writeln!(out, "scale {name} bodies=*");
                continue;
            }
            let bodies: Vec<&str> = self
                .scale_map
                .assignment
                .iter()
                .enumerate()
                .filter(|(_, params)| params.contains(&k))
                .map(|(b, _)| self.bodies[b].name.as_str())
                .collect();
            let _ = writeln!(out, "scale {name} bodies={}", bodies.join(","));
        }
        for c in &self.constraints {
            let _ = writeln!(
                out,
                "constraint {} {} ratio={} offset={}",
                c.dof_a, c.dof_b, c.ratio, c.offset
            );
        }
        out
    }
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

struct Line<'a> {
    number: usize,
    tokens: Vec<Token<'a>>,
}

impl<'a> Line<'a> {
    fn err(&self, column: usize, message: impl Into<String>) -> ModelError {
        ModelError::Syntax {
            line: self.number,
            column,
            message: message.into(),
        }
    }

    fn positional(&self, i: usize, what: &str) -> Result<&'a str, ModelError> {
        match self.tokens.get(i) {
            Some(t) if !t.text.contains('=') => Ok(t.text),
            Some(t) => Err(self.err(t.column, format!("expected {what}, found `{}`", t.text))),
            None => Err(self.err(
                self.tokens.last().map_or(1, |t| t.column + t.text.len()),
                format!("missing {what}"),
            )),
        }
    }

    /// Key-value pairs after the first `skip` tokens; unknown keys are rejected.
    fn options(&self, skip: usize, allowed: &[&str]) -> Result<HashMap<&'a str, (&'a str, usize)>, ModelError> {
        let mut map = HashMap::new();
        for t in &self.tokens[skip.min(self.tokens.len())..] {
            let Some((key, value)) = t.text.split_once('=') else {
                return Err(self.err(t.column, format!("expected key=value, found `{}`", t.text)));
            };
            if !allowed.contains(&key) {
                return Err(self.err(t.column, format!("unknown option `{key}`")));
            }
            if map.insert(key, (value, t.column + key.len() + 1)).is_some() {
                return Err(self.err(t.column, format!("duplicate option `{key}`")));
            }
        }
        Ok(map)
    }

    fn number(&self, text: &str, column: usize) -> Result<f64, ModelError> {
        let v: f64 = text
            .trim()
            .parse()
            .map_err(|_| self.err(column, format!("invalid number `{text}`")))?;
        if !v.is_finite() {
            return Err(self.err(column, format!("non-finite number `{text}`")));
        }
        Ok(v)
    }

    fn numbers<const N: usize>(&self, text: &str, column: usize) -> Result<[f64; N], ModelError> {
        let parts: Vec<&str> = text.split(',').collect();
        if parts.len() != N {
            return Err(self.err(column, format!("expected {N} comma-separated numbers, found `{text}`")));
        }
        let mut out = [0.0; N];
        let mut col = column;
        for (slot, part) in out.iter_mut().zip(&parts) {
            *slot = self.number(part, col)?;
            col += part.len() + 1;
        }
        Ok(out)
    }

    fn required<'m>(
        &self,
        opts: &'m HashMap<&'a str, (&'a str, usize)>,
        key: &str,
    ) -> Result<&'m (&'a str, usize), ModelError> {
        opts.get(key).ok_or_else(|| {
            self.err(
                self.tokens.last().map_or(1, |t| t.column + t.text.len()),
                format!("missing option `{key}=`"),
            )
        })
    }
}

fn tokenize(text: &str) -> Vec<Line<'_>> {
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("");
        let mut tokens = Vec::new();
        let mut start = None;
        for (pos, ch) in content.char_indices() {
            if ch.is_whitespace() {
                if let Some(s) = start.take() {
                    tokens.push(Token {
                        text: &content[s..pos],
                        column: s + 1,
                    });
                }
            } else if start.is_none() {
                start = Some(pos);
            }
        }
        if let Some(s) = start {
            tokens.push(Token {
                text: &content[s..],
                column: s + 1,
            });
        }
        if !tokens.is_empty() {
            lines.push(Line { number: i + 1, tokens });
        }
    }
    lines
}

const AXIS_TOLERANCE: f64 = 1e-9;

/// Parses the model text format.
pub fn parse_model(text: &str) -> Result<SkeletonModel, ModelError> {
    let lines = tokenize(text);
    for line in &lines {
        let head = &line.tokens[0];
        if !matches!(head.text, "body" | "joint" | "site" | "scale" | "constraint") {
            return Err(line.err(head.column, format!("unknown directive `{}`", head.text)));
        }
    }

    let mut bodies: Vec<BodySegment> = Vec::new();
    let mut body_lookup: HashMap<String, usize> = HashMap::new();
    for line in lines.iter().filter(|l| l.tokens[0].text == "body") {
        let name = line.positional(1, "body name")?;
        let opts = line.options(2, &["parent", "offset"])?;
        let (parent_text, _) = *line.required(&opts, "parent")?;
        let (offset_text, offset_col) = *line.required(&opts, "offset")?;
        let attach_offset = line.numbers::<3>(offset_text, offset_col)?;
        if body_lookup.contains_key(name) {
            return Err(semantic(format!("body `{name}`"), "declared twice"));
        }
        let parent = if parent_text == "none" {
            if !bodies.is_empty() {
                return Err(semantic(
                    format!("body `{name}`"),
                    "only the first body may be the root (parent=none)",
                ));
            }
            if attach_offset != [0.0; 3] {
                return Err(semantic(format!("body `{name}`"), "root body must have a zero offset"));
            }
            None
        } else {
            if parent_text == name {
                return Err(semantic(format!("body `{name}`"), "is its own parent"));
            }
            match body_lookup.get(parent_text) {
                Some(&p) => Some(p),
                None => {
                    return Err(semantic(
                        format!("body `{name}`"),
                        format!("parent `{parent_text}` is not declared before it"),
                    ))
                }
            }
        };
        if bodies.is_empty() && parent.is_some() {
            return Err(semantic(
                format!("body `{name}`"),
                "first body must be the root (parent=none)",
            ));
        }
        body_lookup.insert(name.to_string(), bodies.len());
        bodies.push(BodySegment {
            name: name.to_string(),
            parent,
            attach_offset,
        });
    }
    if bodies.is_empty() {
        return Err(semantic("model", "no bodies declared"));
    }

    let find_body = |line: &Line, name: &str, column: usize| -> Result<usize, ModelError> {
        body_lookup
            .get(name)
            .copied()
            .ok_or_else(|| line.err(column, format!("unknown body `{name}`")))
    };

    let mut joints = Vec::new();
    let mut sites: Vec<SiteDef> = Vec::new();
    let mut scale_names: Vec<String> = Vec::new();
    let mut scale_bodies: Vec<Vec<usize>> = Vec::new();
    let mut constraints = Vec::new();
    let mut n_dof = 0;

    for line in &lines {
        let directive = line.tokens[0].text;
        match directive {
            "body" => {}
            "joint" => {
                let body_name = line.positional(1, "body name")?;
                let body = find_body(line, body_name, line.tokens[1].column)?;
                let opts = line.options(2, &["kind", "axis", "range"])?;
                let (kind_text, kind_col) = *line.required(&opts, "kind")?;
                let kind = match kind_text {
                    "free" => JointKind::Free,
                    "hinge" => JointKind::Hinge,
                    "ball" => JointKind::Ball,
                    other => return Err(line.err(kind_col, format!("unknown joint kind `{other}`"))),
                };
                let element = format!("joint on body `{body_name}`");
                let axis = match opts.get("axis") {
                    Some(&(text, col)) => {
                        if kind != JointKind::Hinge {
                            return Err(semantic(element, "only hinge joints take an axis"));
                        }
                        let a = line.numbers::<3>(text, col)?;
                        let norm = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
                        if norm < AXIS_TOLERANCE {
                            return Err(semantic(element, "hinge axis has zero length"));
                        }
                        // Already-unit axes are kept verbatim so text round-trips exactly.
                        if (norm - 1.0).abs() > 1e-12 {
                            Some([a[0] / norm, a[1] / norm, a[2] / norm])
                        } else {
                            Some(a)
                        }
                    }
                    None if kind == JointKind::Hinge => return Err(semantic(element, "hinge joint requires axis=")),
                    None => None,
                };
                let range = match opts.get("range") {
                    Some(&(text, col)) => {
                        if kind == JointKind::Free {
                            return Err(semantic(element, "free joints are unbounded; range= not allowed"));
                        }
                        let [lo, hi] = line.numbers::<2>(text, col)?;
                        if !(lo < hi) {
                            return Err(semantic(element, format!("range {lo},{hi} must satisfy lo < hi")));
                        }
                        Some((lo, hi))
                    }
                    None if kind == JointKind::Hinge => return Err(semantic(element, "hinge joint requires range=")),
                    None => None,
                };
                if kind == JointKind::Free {
                    if body != 0 {
                        return Err(semantic(element, "free joints are only allowed on the root body"));
                    }
                    if joints.iter().any(|j: &JointDef| j.body == 0) {
                        return Err(semantic(element, "free joint must be the only joint on the root"));
                    }
                } else if joints
                    .iter()
                    .any(|j: &JointDef| j.body == body && j.kind == JointKind::Free)
                {
                    return Err(semantic(element, "body already has a free joint"));
                }
                joints.push(JointDef {
                    body,
                    kind,
                    axis,
                    range,
                    dof_start: n_dof,
                });
                n_dof += kind.dof();
            }
            "site" => {
                let name = line.positional(1, "site name")?;
                let opts = line.options(2, &["body", "pos"])?;
                let (body_text, body_col) = *line.required(&opts, "body")?;
                let body = find_body(line, body_text, body_col)?;
                let (pos_text, pos_col) = *line.required(&opts, "pos")?;
                let local_pos = line.numbers::<3>(pos_text, pos_col)?;
                if sites.iter().any(|s| s.name == name) {
                    return Err(semantic(format!("site `{name}`"), "duplicate site name"));
                }
                sites.push(SiteDef {
                    name: name.to_string(),
                    body,
                    local_pos,
                });
            }
            "scale" => {
                let name = line.positional(1, "scale name")?;
                let opts = line.options(2, &["bodies"])?;
                if scale_names.iter().any(|n| n == name) {
                    return Err(semantic(format!("scale `{name}`"), "duplicate scale name"));
                }
                let members = if scale_names.is_empty() {
                    (0..bodies.len()).collect()
                } else {
                    let (list, col) = *line.required(&opts, "bodies")?;
                    if list == "*" {
                        (0..bodies.len()).collect()
                    } else {
                        let mut members = Vec::new();
                        let mut c = col;
                        for part in list.split(',') {
                            let b = find_body(line, part, c)?;
                            if members.contains(&b) {
                                return Err(semantic(
                                    format!("scale `{name}`"),
                                    format!("body `{part}` listed twice"),
                                ));
                            }
                            members.push(b);
                            c += part.len() + 1;
                        }
                        members
                    }
                };
                scale_names.push(name.to_string());
                scale_bodies.push(members);
            }
            "constraint" => {
                let a_text = line.positional(1, "first pose index")?;
                let b_text = line.positional(2, "second pose index")?;
                let parse_index = |t: &str, col: usize| -> Result<usize, ModelError> {
                    t.parse::<usize>()
                        .map_err(|_| line.err(col, format!("invalid pose index `{t}`")))
                };
                let dof_a = parse_index(a_text, line.tokens[1].column)?;
                let dof_b = parse_index(b_text, line.tokens[2].column)?;
                let opts = line.options(3, &["ratio", "offset"])?;
                let (r_text, r_col) = *line.required(&opts, "ratio")?;
                let (o_text, o_col) = *line.required(&opts, "offset")?;
                constraints.push(EqualityConstraint {
                    dof_a,
                    dof_b,
                    ratio: line.number(r_text, r_col)?,
                    offset: line.number(o_text, o_col)?,
                });
            }
            other => {
                return Err(line.err(line.tokens[0].column, format!("unknown directive `{other}`")));
            }
        }
    }

    if scale_names.is_empty() {
        return Err(semantic("model", "at least one (overall) scale must be declared"));
    }
    for (i, c) in constraints.iter().enumerate() {
        let element = format!("constraint {i} ({} {})", c.dof_a, c.dof_b);
        if c.dof_a == c.dof_b {
            return Err(semantic(element, "couples a coordinate with itself"));
        }
        if c.dof_a >= n_dof || c.dof_b >= n_dof {
            return Err(semantic(element, format!("pose index out of range (n_dof = {n_dof})")));
        }
    }

    let mut assignment = vec![Vec::new(); bodies.len()];
    for (k, members) in scale_bodies.iter().enumerate() {
        for &b in members {
            assignment[b].push(k);
        }
    }

    Ok(SkeletonModel {
        bodies,
        joints,
        sites,
        scale_map: ScaleMap {
            names: scale_names,
            assignment,
        },
        constraints,
        n_dof,
    })
}

/// The bundled 21-body, 40-DoF biped with 87 marker sites and 8 scale parameters.
pub const BIPED_TEXT: &str = include_str!("../models/biped.model");
/// A variant of the biped whose spine is split into three segments with coupled rotations.
pub const BIPED_SPINE_TEXT: &str = include_str!("../models/biped_spine.model");

pub fn demo_biped() -> SkeletonModel {
    parse_model(BIPED_TEXT).expect("bundled biped model parses")
}

pub fn demo_biped_spine() -> SkeletonModel {
    parse_model(BIPED_SPINE_TEXT).expect("bundled spine model parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "body root parent=none offset=0,0,0\n\
                           joint root kind=free\n\
                           site tip body=root pos=0.1,0,0\n\
                           scale overall\n";

    #[test]
    fn minimal_model() {
        let m = parse_model(MINIMAL).unwrap();
        assert_eq!(m.n_dof, 6);
        assert_eq!(m.n_sites(), 1);
        assert_eq!(m.dof_limits(), vec![None; 6]);
    }

    #[test]
    fn demo_biped_counts() {
        let m = demo_biped();
        assert_eq!(m.bodies.len(), 21);
        assert_eq!(m.n_dof, 40);
        assert_eq!(m.n_sites(), 87);
        assert_eq!(m.scale_map.n_scales(), 8);
        assert!(m.constraints.is_empty());
    }

    #[test]
    fn demo_spine_has_constraints() {
        let m = demo_biped_spine();
        assert!(!m.constraints.is_empty());
        assert_eq!(m.n_sites(), 87);
    }

    #[test]
    fn child_before_parent_names_child() {
        let text = "body root parent=none offset=0,0,0\n\
                    body shin parent=thigh offset=0,0,-0.4\n\
                    body thigh parent=root offset=0,0,-0.1\n\
                    scale overall\n";
        match parse_model(text) {
            Err(ModelError::Semantic { element, .. }) => assert!(element.contains("shin")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_errors_report_position() {
        let text = "body root parent=none offset=0,0,0\njoint root kind=hinge axis=0,0,x range=-1,1\n";
        match parse_model(text) {
            Err(ModelError::Syntax { line, column, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(column, 32);
            }
            other => panic!("unexpected {other:?}"),
        }
        match parse_model("bogus x\n") {
            Err(ModelError::Syntax { line: 1, column: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_errors() {
        let dup = format!("{MINIMAL}site tip body=root pos=0,0,0\n");
        assert!(matches!(parse_model(&dup), Err(ModelError::Semantic { element, .. }) if element.contains("tip")));
        let bad_range =
            "body root parent=none offset=0,0,0\njoint root kind=hinge axis=0,0,1 range=1,-1\nscale overall\n";
        assert!(matches!(parse_model(bad_range), Err(ModelError::Semantic { .. })));
        let self_coupled = format!("{MINIMAL}constraint 3 3 ratio=1 offset=0\n");
        assert!(matches!(parse_model(&self_coupled), Err(ModelError::Semantic { .. })));
        let out_of_range = format!("{MINIMAL}constraint 3 9 ratio=1 offset=0\n");
        assert!(matches!(parse_model(&out_of_range), Err(ModelError::Semantic { .. })));
        let cycle = "body a parent=none offset=0,0,0\nbody b parent=b offset=0,0,1\nscale overall\n";
        assert!(matches!(parse_model(cycle), Err(ModelError::Semantic { element, .. }) if element.contains('b')));
    }

    #[test]
    fn text_round_trip() {
        for text in [BIPED_TEXT, BIPED_SPINE_TEXT, MINIMAL] {
            let m = parse_model(text).unwrap();
            let again = parse_model(&m.to_text()).unwrap();
            assert_eq!(m, again);
        }
    }

    #[test]
    fn body_scale_examples() {
        let m = demo_biped();
        let n = m.scale_map.n_scales();
        assert!(m.body_scales(&vec![1.0; n]).unwrap().iter().all(|&f| f == 1.0));

        let mut s = vec![1.0; n];
        s[0] = 1.1;
        assert!(m.body_scales(&s).unwrap().iter().all(|&f| f == 1.1));

        let lt = m.scale_map.names.iter().position(|n| n == "left_thigh").unwrap();
        s[lt] = 1.2;
        let f = m.body_scales(&s).unwrap();
        let femur_l = m.body_index("femur_l").unwrap();
        let pelvis = m.body_index("pelvis").unwrap();
        assert!((f[femur_l] - 1.32).abs() < 1e-12);
        assert_eq!(f[pelvis], 1.1);

        s[3] = 0.0;
        assert!(matches!(
            m.body_scales(&s),
            Err(ModelError::NonPositiveScale { index: 3, .. })
        ));
    }
}

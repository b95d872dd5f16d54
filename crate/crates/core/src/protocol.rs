//! Agent-facing text protocol.
//!
//! Hypergraph text, one item per line:
//!
//! ```text
//! node 1 "bed"
//! node 4 "lamp" planned
//! contact(1,2) w=1.0 eps=0.01
//! alignment(1,3) w=1.0 axes=xz
//! equidistance(1,2,3) w=1.0 axis=(1.0,0.0,0.0)
//! ```
//!
//! Edits, one per line:
//!
//! ```text
//! move 3 s=1.0 r=quat(1,0,0,0) t=(0.5,0,0)
//! replace 3 file=chair.ply
//! addedge contact(1,2) eps=0.02
//! dropedge 0
//! ```
//!
//! Blank lines and lines starting with `#` are ignored everywhere.

use crate::context::{AxisSet, HyperEdge, InstanceId, Node, Relation, SceneHypergraph, SpatialContext};
use crate::geometry::{Aabb, SimilarityTransform};
use crate::io::{format_portrait, load_cloud};
use crate::projection::export_canonical_views;
use crate::Vec3;
use nalgebra::{Quaternion, UnitQuaternion};
use std::collections::{BTreeSet, VecDeque};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Duration;
use thiserror::Error;

/// Environment variable holding the bearer token for the HTTP agent.
pub const TOKEN_ENV: &str = "SCENECTX_AGENT_TOKEN";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("ParseError: line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("UnknownRelation: line {line}, column {column}: `{name}`")]
    UnknownRelation { line: usize, column: usize, name: String },
    #[error("ArityMismatch: line {line}: {relation} takes {expected} members, got {found}")]
    ArityMismatch { line: usize, relation: Relation, expected: usize, found: usize },
    #[error("InvalidTransform: line {line}: {message}")]
    InvalidTransform { line: usize, message: String },
    #[error("UnknownInstance: {0}")]
    UnknownInstance(InstanceId),
    #[error("UnknownEdge: no edge with ordinal {0}")]
    UnknownEdge(usize),
    #[error("ValidationFailed: {0}")]
    ValidationFailed(String),
    #[error("ScriptExhausted: {0}")]
    ScriptExhausted(String),
    #[error("IoError: {0}")]
    Io(String),
    #[error("TransportError: {0}")]
    Transport(String),
}

// ---------------------------------------------------------------------------
// Lexing

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
    line: usize,
    /// Columns consumed before `text` on the physical line.
    col_offset: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str, line: usize, col_offset: usize) -> Self {
        Self { text, pos: 0, line, col_offset }
    }

    fn column(&self) -> usize {
        self.col_offset + self.text[..self.pos].chars().count() + 1
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ProtocolError> {
        Err(ProtocolError::Parse { line: self.line, column: self.column(), message: message.into() })
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos == self.text.len()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ProtocolError> {
        if self.eat(c) {
            Ok(())
        } else {
            match self.peek() {
                Some(found) => self.error(format!("expected `{c}`, found `{found}`")),
                None => self.error(format!("expected `{c}`, found end of line")),
            }
        }
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if !f(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.text[start..self.pos]
    }

    fn ident(&mut self) -> Result<(&'a str, usize), ProtocolError> {
        self.skip_ws();
        let col = self.column();
        let word = self.take_while(|c| c.is_ascii_alphanumeric() || c == '_');
        if word.is_empty() {
            return self.error("expected a keyword");
        }
        Ok((word, col))
    }

    fn number_token(&mut self) -> (&'a str, usize) {
        self.skip_ws();
        let col = self.column();
        (self.take_while(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '+')), col)
    }

    fn uint<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, ProtocolError> {
        let (tok, col) = self.number_token();
        tok.parse().map_err(|_| ProtocolError::Parse { line: self.line, column: col, message: format!("expected {what}, found `{tok}`") })
    }

    fn float(&mut self) -> Result<f64, ProtocolError> {
        let (tok, col) = self.number_token();
        match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(ProtocolError::Parse { line: self.line, column: col, message: format!("expected a finite number, found `{tok}`") }),
        }
    }

    fn tuple<const N: usize>(&mut self) -> Result<[f64; N], ProtocolError> {
        self.expect('(')?;
        let mut out = [0.0; N];
        for (k, v) in out.iter_mut().enumerate() {
            if k > 0 {
                self.expect(',')?;
            }
            *v = self.float()?;
        }
        self.expect(')')?;
        Ok(out)
    }

    fn quoted(&mut self) -> Result<String, ProtocolError> {
        self.expect('"')?;
        let mut out = String::new();
        loop {
            let Some(c) = self.peek() else { return self.error("unterminated string") };
            self.pos += c.len_utf8();
            match c {
                '"' => return Ok(out),
                '\\' => {
                    let Some(e) = self.peek() else { return self.error("unterminated escape") };
                    self.pos += e.len_utf8();
                    match e {
                        '"' | '\\' => out.push(e),
                        'n' => out.push('\n'),
                        _ => return self.error(format!("unknown escape `\\{e}`")),
                    }
                }
                _ => out.push(c),
            }
        }
    }

    fn word(&mut self) -> &'a str {
        self.skip_ws();
        self.take_while(|c| !c.is_whitespace())
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(k, l)| (k + 1, l)).filter(|(_, l)| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('#')
    })
}

// ---------------------------------------------------------------------------
// Hypergraph text

/// Canonical single-line form of an edge. `w` is always written.
pub fn format_edge(e: &HyperEdge) -> String {
    let members: Vec<String> = e.members.iter().map(|m| m.to_string()).collect();
    let mut s = format!("{}({}) w={:?}", e.relation, members.join(","), e.weight);
    if let Some(v) = e.params.epsilon {
        let _ = write!(s, " eps={v:?}");
    }
    if let Some(v) = e.params.clearance_radius {
        let _ = write!(s, " dmin={v:?}");
    }
    if let Some(v) = e.params.axes {
        let _ = write!(s, " axes={v}");
    }
    if let Some(a) = e.params.axis {
        let _ = write!(s, " axis=({:?},{:?},{:?})", a.x, a.y, a.z);
    }
    s
}

pub fn serialize_hypergraph(g: &SceneHypergraph) -> String {
    let mut s = String::new();
    for node in g.nodes.values() {
        let _ = writeln!(s, "node {} {}{}", node.id, quote(&node.name), if node.planned { " planned" } else { "" });
    }
    for e in &g.edges {
        s.push_str(&format_edge(e));
        s.push('\n');
    }
    s
}

fn applies(key: &str, r: Relation) -> bool {
    match key {
        "w" => true,
        "eps" => r == Relation::Contact,
        "dmin" => r == Relation::Clearance,
        "axes" => matches!(r, Relation::Alignment | Relation::Symmetry),
        "axis" => r == Relation::Equidistance,
        _ => false,
    }
}

fn parse_edge_at(cur: &mut Cursor) -> Result<HyperEdge, ProtocolError> {
    let (name, name_col) = cur.ident()?;
    let relation = Relation::from_name(name).ok_or_else(|| ProtocolError::UnknownRelation {
        line: cur.line,
        column: name_col,
        name: name.to_string(),
    })?;
    cur.expect('(')?;
    let mut members = vec![cur.uint::<InstanceId>("an instance id")?];
    while cur.eat(',') {
        members.push(cur.uint::<InstanceId>("an instance id")?);
    }
    cur.expect(')')?;
    if members.len() != relation.arity() {
        return Err(ProtocolError::ArityMismatch { line: cur.line, relation, expected: relation.arity(), found: members.len() });
    }
    let mut edge = HyperEdge::new(relation, members);
    let mut seen = BTreeSet::new();
    while !cur.at_end() {
        let (key, col) = cur.ident()?;
        let line = cur.line;
        let err = |message: String| ProtocolError::Parse { line, column: col, message };
        if !["w", "eps", "dmin", "axes", "axis"].contains(&key) {
            return Err(err(format!("unknown key `{key}`")));
        }
        if !applies(key, relation) {
            return Err(err(format!("`{key}` does not apply to {relation}")));
        }
        if !seen.insert(key) {
            return Err(err(format!("duplicate key `{key}`")));
        }
        cur.expect('=')?;
        match key {
            "w" => {
                let v = cur.float()?;
                if v < 0.0 {
                    return Err(err(format!("weight must be non-negative, got {v}")));
                }
                edge.weight = v;
            }
            "eps" => {
                let v = cur.float()?;
                if v <= 0.0 {
                    return Err(err(format!("eps must be positive, got {v}")));
                }
                edge.params.epsilon = Some(v);
            }
            "dmin" => {
                let v = cur.float()?;
                if v < 0.0 {
                    return Err(err(format!("dmin must be non-negative, got {v}")));
                }
                edge.params.clearance_radius = Some(v);
            }
            "axes" => {
                let w = cur.word();
                edge.params.axes = Some(AxisSet::parse(w).ok_or_else(|| err(format!("bad axis set `{w}`")))?);
            }
            _ => {
                let [x, y, z] = cur.tuple::<3>()?;
                let a = Vec3::new(x, y, z);
                if (a.norm() - 1.0).abs() > 1e-9 {
                    return Err(err(format!("axis must be a unit vector, norm is {}", a.norm())));
                }
                edge.params.axis = Some(a);
            }
        }
    }
    Ok(edge)
}

/// Parses one edge line (without the leading keyword of an edit).
pub fn parse_edge(line: &str, line_no: usize) -> Result<HyperEdge, ProtocolError> {
    parse_edge_at(&mut Cursor::new(line, line_no, 0))
}

fn parse_node(cur: &mut Cursor) -> Result<Node, ProtocolError> {
    let id: InstanceId = cur.uint("an instance id")?;
    let name = cur.quoted()?;
    let planned = if cur.at_end() {
        false
    } else {
        match cur.ident()? {
            ("planned", _) => true,
            (other, col) => return Err(ProtocolError::Parse { line: cur.line, column: col, message: format!("unexpected `{other}`") }),
        }
    };
    if !cur.at_end() {
        return cur.error("trailing input after node");
    }
    Ok(Node { id, name, planned })
}

pub fn parse_hypergraph(text: &str) -> Result<SceneHypergraph, ProtocolError> {
    let mut g = SceneHypergraph::default();
    for (line_no, line) in content_lines(text) {
        let mut cur = Cursor::new(line, line_no, 0);
        cur.skip_ws();
        if cur.rest().starts_with("node") && cur.rest()[4..].starts_with(char::is_whitespace) {
            cur.pos += 4;
            let node = parse_node(&mut cur)?;
            if g.nodes.contains_key(&node.id) {
                return Err(ProtocolError::Parse { line: line_no, column: 1, message: format!("duplicate node {}", node.id) });
            }
            g.nodes.insert(node.id, node);
        } else {
            g.edges.push(parse_edge_at(&mut cur)?);
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Edits

#[derive(Debug, Clone, PartialEq)]
pub enum EditCommand {
    TransformInstance { id: InstanceId, transform: SimilarityTransform },
    ReplaceInstance { id: InstanceId, file: PathBuf },
    AddEdge(HyperEdge),
    RemoveEdge(usize),
}

impl fmt::Display for EditCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditCommand::TransformInstance { id, transform } => {
                let q = transform.quaternion();
                let t = transform.translation();
                write!(
                    f,
                    "move {id} s={:?} r=quat({:?},{:?},{:?},{:?}) t=({:?},{:?},{:?})",
                    transform.scale(),
                    q.w,
                    q.i,
                    q.j,
                    q.k,
                    t.x,
                    t.y,
                    t.z
                )
            }
            EditCommand::ReplaceInstance { id, file } => {
                let path = file.display().to_string();
                if path.chars().any(|c| c.is_whitespace() || c == '"') {
                    write!(f, "replace {id} file={}", quote(&path))
                } else {
                    write!(f, "replace {id} file={path}")
                }
            }
            EditCommand::AddEdge(e) => write!(f, "addedge {}", format_edge(e)),
            EditCommand::RemoveEdge(k) => write!(f, "dropedge {k}"),
        }
    }
}

/// Quaternions further than this from unit norm are rejected.
const QUAT_TOLERANCE: f64 = 1e-6;

fn parse_move(cur: &mut Cursor) -> Result<EditCommand, ProtocolError> {
    let line = cur.line;
    let id: InstanceId = cur.uint("an instance id")?;
    let mut scale = None;
    let mut rotation = None;
    let mut translation = None;
    while !cur.at_end() {
        let (key, col) = cur.ident()?;
        let err = |message: String| ProtocolError::Parse { line, column: col, message };
        cur.expect('=')?;
        match key {
            "s" if scale.is_none() => scale = Some(cur.float()?),
            "r" if rotation.is_none() => {
                let (kw, _) = cur.ident()?;
                if kw != "quat" {
                    return Err(err(format!("expected quat(...), found `{kw}`")));
                }
                rotation = Some(cur.tuple::<4>()?);
            }
            "t" if translation.is_none() => translation = Some(cur.tuple::<3>()?),
            "s" | "r" | "t" => return Err(err(format!("duplicate key `{key}`"))),
            _ => return Err(err(format!("unknown key `{key}`"))),
        }
    }
    let [x, y, z] = translation.ok_or(ProtocolError::Parse { line, column: cur.column(), message: "move needs t=(x,y,z)".into() })?;
    let scale = scale.unwrap_or(1.0);
    let invalid = |message: String| ProtocolError::InvalidTransform { line, message };
    if scale <= 0.0 {
        return Err(invalid(format!("scale must be positive, got {scale}")));
    }
    let q = match rotation {
        Some([w, i, j, k]) => {
            let q = Quaternion::new(w, i, j, k);
            if (q.norm() - 1.0).abs() > QUAT_TOLERANCE {
                return Err(invalid(format!("rotation quaternion has norm {}", q.norm())));
            }
            UnitQuaternion::from_quaternion(q)
        }
        None => UnitQuaternion::identity(),
    };
    let transform = SimilarityTransform::from_quaternion(scale, q, Vec3::new(x, y, z)).map_err(|e| invalid(e.to_string()))?;
    Ok(EditCommand::TransformInstance { id, transform })
}

pub fn parse_edit_commands(text: &str) -> Result<Vec<EditCommand>, ProtocolError> {
    let mut out = Vec::new();
    for (line_no, line) in content_lines(text) {
        let mut cur = Cursor::new(line, line_no, 0);
        let (kw, col) = cur.ident()?;
        let cmd = match kw {
            "move" => parse_move(&mut cur)?,
            "replace" => {
                let id: InstanceId = cur.uint("an instance id")?;
                let (key, _) = cur.ident()?;
                if key != "file" {
                    return cur.error("expected file=<path>");
                }
                cur.expect('=')?;
                cur.skip_ws();
                let file = if cur.peek() == Some('"') { cur.quoted()? } else { cur.word().to_string() };
                if file.is_empty() {
                    return cur.error("empty file path");
                }
                if !cur.at_end() {
                    return cur.error("trailing input after replace");
                }
                EditCommand::ReplaceInstance { id, file: PathBuf::from(file) }
            }
            "addedge" => EditCommand::AddEdge(parse_edge_at(&mut cur)?),
            "dropedge" => {
                let k = cur.uint::<usize>("an edge ordinal")?;
                if !cur.at_end() {
                    return cur.error("trailing input after dropedge");
                }
                EditCommand::RemoveEdge(k)
            }
            other => {
                return Err(ProtocolError::Parse { line: line_no, column: col, message: format!("unknown command `{other}`") })
            }
        };
        out.push(cmd);
    }
    Ok(out)
}

/// Resolves relative replacement files against `base`.
pub fn rebase_paths(commands: &mut [EditCommand], base: &Path) {
    for c in commands {
        if let EditCommand::ReplaceInstance { file, .. } = c {
            if file.is_relative() {
                *file = base.join(&*file);
            }
        }
    }
}

fn apply_one(ctx: &SpatialContext, cmd: &EditCommand) -> Result<SpatialContext, ProtocolError> {
    let require = |id: InstanceId| if ctx.graph.contains(id) { Ok(()) } else { Err(ProtocolError::UnknownInstance(id)) };
    match cmd {
        EditCommand::TransformInstance { id, transform } => {
            require(*id)?;
            ctx.transform_instance(*id, transform).map_err(|e| ProtocolError::ValidationFailed(e.to_string()))
        }
        EditCommand::ReplaceInstance { id, file } => {
            require(*id)?;
            let mut cloud = load_cloud(file).map_err(|e| ProtocolError::Io(e.to_string()))?;
            cloud.unit_scale = ctx.cloud.unit_scale;
            ctx.replace_instance(*id, &cloud).map_err(|e| ProtocolError::ValidationFailed(e.to_string()))
        }
        EditCommand::AddEdge(e) => {
            let mut out = ctx.clone();
            out.graph.edges.push(e.clone());
            Ok(out)
        }
        EditCommand::RemoveEdge(k) => {
            if *k >= ctx.graph.edges.len() {
                return Err(ProtocolError::UnknownEdge(*k));
            }
            let mut out = ctx.clone();
            out.graph.edges.remove(*k);
            Ok(out)
        }
    }
}

/// Applies `commands` in order. Either all apply and the result validates,
/// or the error is returned and nothing changes.
pub fn apply_edits(ctx: &SpatialContext, commands: &[EditCommand]) -> Result<SpatialContext, ProtocolError> {
    let mut cur = ctx.clone();
    for c in commands {
        cur = apply_one(&cur, c)?;
    }
    let report = cur.validate();
    if !report.is_ok() {
        return Err(ProtocolError::ValidationFailed(report.to_string()));
    }
    Ok(cur)
}

// ---------------------------------------------------------------------------
// Readout

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRow {
    pub id: InstanceId,
    pub name: String,
    pub planned: bool,
    pub points: usize,
    pub aabb: Option<Aabb>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutDocument {
    pub portrait_text: String,
    pub instance_table: Vec<InstanceRow>,
    pub hypergraph_text: String,
    /// Exported point maps, relative to the view directory.
    pub view_refs: Vec<PathBuf>,
}

fn fmt_vec(v: &Vec3) -> String {
    format!("({:.4},{:.4},{:.4})", v.x, v.y, v.z)
}

impl ReadoutDocument {
    pub fn to_text(&self) -> String {
        let mut s = String::from("[portrait]\n");
        s.push_str(&self.portrait_text);
        s.push_str("[instances]\n");
        for r in &self.instance_table {
            let _ = write!(s, "{} {} points={}", r.id, quote(&r.name), r.points);
            if let Some(b) = &r.aabb {
                let _ = write!(s, " min={} max={}", fmt_vec(&b.min), fmt_vec(&b.max));
            }
            if r.planned {
                s.push_str(" planned");
            }
            s.push('\n');
        }
        s.push_str("[hypergraph]\n");
        s.push_str(&self.hypergraph_text);
        s.push_str("[views]\n");
        for v in &self.view_refs {
            let _ = writeln!(s, "{}", v.display());
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewOptions {
    pub dir: PathBuf,
    pub resolution: usize,
    pub splat_radius: usize,
}

impl ViewOptions {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            resolution: crate::projection::DEFAULT_RESOLUTION,
            splat_radius: crate::projection::DEFAULT_SPLAT_RADIUS,
        }
    }
}

/// Builds the readout of a valid context, exporting canonical point maps
/// when `views` is given.
pub fn serialize_readout(ctx: &SpatialContext, views: Option<&ViewOptions>) -> Result<ReadoutDocument, ProtocolError> {
    let report = ctx.validate();
    if !report.is_ok() {
        return Err(ProtocolError::ValidationFailed(report.to_string()));
    }
    let counts = ctx.cloud.label_counts();
    let instance_table = ctx
        .graph
        .nodes
        .values()
        .map(|n| InstanceRow {
            id: n.id,
            name: n.name.clone(),
            planned: n.planned,
            points: counts.get(&n.id).copied().unwrap_or(0),
            aabb: ctx.instance_aabb(n.id).ok(),
        })
        .collect();
    let view_refs = match views {
        Some(v) => export_canonical_views(&ctx.cloud, &v.dir, v.resolution, v.resolution, v.splat_radius)
            .map_err(|e| ProtocolError::Io(e.to_string()))?
            .into_iter()
            .map(|p| p.strip_prefix(&v.dir).map(Path::to_path_buf).unwrap_or(p))
            .collect(),
        None => Vec::new(),
    };
    Ok(ReadoutDocument {
        portrait_text: format_portrait(&ctx.portrait),
        instance_table,
        hypergraph_text: serialize_hypergraph(&ctx.graph),
        view_refs,
    })
}

// ---------------------------------------------------------------------------
// Agents and sessions

pub trait Agent {
    /// The agent's reply to a readout, or `None` when it has nothing more
    /// to say.
    fn respond(&mut self, readout: &str) -> Result<Option<String>, ProtocolError>;
}

/// Canned responses replayed in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScriptedAgent {
    responses: VecDeque<String>,
}

impl ScriptedAgent {
    pub fn new(responses: impl IntoIterator<Item = String>) -> Self {
        Self { responses: responses.into_iter().collect() }
    }

    /// Script files hold responses as blocks of lines each closed by a line
    /// reading `end`. Lines outside blocks must be blank or comments.
    pub fn parse_script(text: &str) -> Result<Self, ProtocolError> {
        let mut responses = Vec::new();
        let mut block: Option<String> = None;
        for line in text.lines() {
            if line.trim() == "end" {
                responses.push(block.take().unwrap_or_default());
                continue;
            }
            match &mut block {
                Some(b) => {
                    b.push_str(line);
                    b.push('\n');
                }
                None if line.trim().is_empty() || line.trim_start().starts_with('#') => {}
                None => block = Some(format!("{line}\n")),
            }
        }
        if let Some(b) = block {
            return Err(ProtocolError::ScriptExhausted(format!("response starting `{}` has no closing `end`", b.lines().next().unwrap_or(""))));
        }
        Ok(Self::new(responses))
    }

    pub fn remaining(&self) -> usize {
        self.responses.len()
    }
}

impl Agent for ScriptedAgent {
    fn respond(&mut self, _readout: &str) -> Result<Option<String>, ProtocolError> {
        Ok(self.responses.pop_front())
    }
}

/// Remote agent: POSTs the readout as plain text and reads the reply body.
/// An empty reply ends the session.
#[derive(Debug, Clone, PartialEq)]
pub struct HttpAgent {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
}

impl HttpAgent {
    /// Reads the bearer token from the environment.
    pub fn from_env(url: impl Into<String>, timeout: Duration) -> Self {
        Self { url: url.into(), token: std::env::var(TOKEN_ENV).ok(), timeout }
    }
}

impl Agent for HttpAgent {
    fn respond(&mut self, readout: &str) -> Result<Option<String>, ProtocolError> {
        let transport = |e: ureq::Error| ProtocolError::Transport(e.to_string());
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
        let mut req = agent.post(&self.url).header("Content-Type", "text/plain; charset=utf-8");
        if let Some(tok) = &self.token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let mut resp = req.send(readout).map_err(transport)?;
        let body = resp.body_mut().read_to_string().map_err(transport)?;
        Ok((!body.trim().is_empty()).then_some(body))
    }
}

pub enum AgentEndpoint {
    Scripted(ScriptedAgent),
    Http(HttpAgent),
}

impl Agent for AgentEndpoint {
    fn respond(&mut self, readout: &str) -> Result<Option<String>, ProtocolError> {
        match self {
            AgentEndpoint::Scripted(a) => a.respond(readout),
            AgentEndpoint::Http(a) => a.respond(readout),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Exchange {
    Readout(String),
    Response(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub exchanges: Vec<Exchange>,
}

impl Transcript {
    pub fn readouts(&self) -> usize {
        self.exchanges.iter().filter(|e| matches!(e, Exchange::Readout(_))).count()
    }

    pub fn responses(&self) -> usize {
        self.exchanges.iter().filter(|e| matches!(e, Exchange::Response(_))).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (mut r, mut a) = (0, 0);
        for e in &self.exchanges {
            match e {
                Exchange::Readout(t) => {
                    r += 1;
                    let _ = writeln!(s, "=== readout {r} ===");
                    s.push_str(t);
                }
                Exchange::Response(t) => {
                    a += 1;
                    let _ = writeln!(s, "=== response {a} ===");
                    s.push_str(t);
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error}")]
pub struct SessionError {
    pub error: ProtocolError,
    pub transcript: Transcript,
}

/// Read/update loop: readout, agent reply, parse and apply, until the agent
/// stops replying.
pub fn run_session(
    agent: &mut dyn Agent,
    ctx: &SpatialContext,
    views: Option<&ViewOptions>,
    base: Option<&Path>,
) -> Result<(SpatialContext, Transcript), SessionError> {
    let mut transcript = Transcript::default();
    let mut current = ctx.clone();
    loop {
        let step = (|| {
            let doc = serialize_readout(&current, views)?;
            Ok::<_, ProtocolError>(doc.to_text())
        })();
        let text = match step {
            Ok(t) => t,
            Err(error) => return Err(SessionError { error, transcript }),
        };
        transcript.exchanges.push(Exchange::Readout(text.clone()));
        let reply = match agent.respond(&text) {
            Ok(Some(r)) => r,
            Ok(None) => return Ok((current, transcript)),
            Err(error) => return Err(SessionError { error, transcript }),
        };
        transcript.exchanges.push(Exchange::Response(reply.clone()));
        let applied = parse_edit_commands(&reply).and_then(|mut cmds| {
            if let Some(b) = base {
                rebase_paths(&mut cmds, b);
            }
            apply_edits(&current, &cmds)
        });
        match applied {
            Ok(next) => current = next,
            Err(error) => return Err(SessionError { error, transcript }),
        }
    }
}

/// Session against a scripted endpoint.
pub fn run_stub_session(agent: &mut ScriptedAgent, ctx: &SpatialContext) -> Result<(SpatialContext, Transcript), SessionError> {
    run_session(agent, ctx, None, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{LabeledPoint, LabeledPointCloud, RelationParams, ScenePortrait};
    use crate::io::save_cloud;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grammar_examples() {
        let g = parse_hypergraph("contact(1,2) w=1.0 eps=0.01").unwrap();
        assert_eq!(g.edges.len(), 1);
        let e = &g.edges[0];
        assert_eq!((e.relation, e.members.clone(), e.weight, e.params.epsilon), (Relation::Contact, vec![1, 2], 1.0, Some(0.01)));

        assert!(matches!(parse_hypergraph("symmetry(1,2)"), Err(ProtocolError::ArityMismatch { expected: 3, found: 2, .. })));
        assert_eq!(
            parse_hypergraph("\n  touches(1,2)"),
            Err(ProtocolError::UnknownRelation { line: 2, column: 3, name: "touches".into() })
        );
        assert!(matches!(parse_hypergraph("contact(1,2) axes=x"), Err(ProtocolError::Parse { line: 1, column: 14, .. })));
        assert!(matches!(parse_hypergraph("contact(1,2) eps=0"), Err(ProtocolError::Parse { .. })));
        assert!(matches!(parse_hypergraph("contact(1,2) w=1 w=2"), Err(ProtocolError::Parse { .. })));
        assert!(matches!(parse_hypergraph("equidistance(1,2,3) axis=(1,1,0)"), Err(ProtocolError::Parse { .. })));
        assert!(matches!(parse_hypergraph("contact(1,2"), Err(ProtocolError::Parse { line: 1, column: 12, .. })));
        let g = parse_hypergraph("# comment\nnode 1 \"bed\"\nnode 2 \"a \\\"b\\\"\" planned\nclearance(1)\n").unwrap();
        assert_eq!(g.nodes[&2].name, "a \"b\"");
        assert!(g.nodes[&2].planned);
        assert_eq!(g.edges[0].weight, 0.5);
    }

    fn random_graph(rng: &mut ChaCha8Rng) -> SceneHypergraph {
        let mut g = SceneHypergraph::default();
        let n = rng.random_range(3..8u32);
        for id in 1..=n {
            let name: String = (0..rng.random_range(0..8)).map(|_| *['a', 'B', ' ', '"', '\\', 'é', '_', '7'].get(rng.random_range(0..8)).unwrap()).collect();
            g.nodes.insert(id, Node { id, name, planned: rng.random_bool(0.2) });
        }
        for _ in 0..rng.random_range(0..6) {
            let r = Relation::ALL[rng.random_range(0..5)];
            let members = rand::seq::index::sample(rng, n as usize, r.arity()).into_iter().map(|m| m as u32 + 1).collect();
            let mut e = HyperEdge::new(r, members).with_weight(rng.random_range(0.0..5.0));
            let mut p = RelationParams::default();
            match r {
                Relation::Contact if rng.random_bool(0.5) => p.epsilon = Some(rng.random_range(1e-4..0.1)),
                Relation::Clearance if rng.random_bool(0.5) => p.clearance_radius = Some(rng.random_range(0.0..2.0)),
                Relation::Alignment | Relation::Symmetry if rng.random_bool(0.5) => p.axes = AxisSet::from_bits(rng.random_range(1..8)),
                Relation::Equidistance if rng.random_bool(0.5) => {
                    p.axis = Some(Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)).normalize())
                }
                _ => {}
            }
            e.params = p;
            g.edges.push(e);
        }
        g
    }

    #[test]
    fn hypergraph_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let g = random_graph(&mut rng);
            let text = serialize_hypergraph(&g);
            let back = parse_hypergraph(&text).unwrap();
            assert_eq!(back, g, "{text}");
            assert_eq!(serialize_hypergraph(&back), text);
        }
    }

    fn scene() -> SpatialContext {
        let mut pts = Vec::new();
        for k in 0..30 {
            let label = (k % 3) as InstanceId;
            pts.push(LabeledPoint::new(Vec3::new(k as f64 * 0.1, label as f64, 0.5), [0.5; 3], label));
        }
        let mut g = SceneHypergraph::default();
        g.add_node(1, "bed").add_node(2, "desk");
        g.add_edge(HyperEdge::new(Relation::Contact, vec![1, 2]));
        SpatialContext::new(ScenePortrait::from_text("A small room."), LabeledPointCloud::new(pts), g)
    }

    #[test]
    fn edit_examples() {
        let cmds = parse_edit_commands("move 3 t=(0.5,0,0)").unwrap();
        let EditCommand::TransformInstance { id, transform } = &cmds[0] else { panic!() };
        assert_eq!(*id, 3);
        assert_eq!(transform.scale(), 1.0);
        assert_eq!(*transform.rotation(), nalgebra::Rotation3::identity());
        assert_eq!(*transform.translation(), Vec3::new(0.5, 0.0, 0.0));

        assert!(matches!(parse_edit_commands("move 3 s=-1 t=(0,0,0)"), Err(ProtocolError::InvalidTransform { .. })));
        assert!(matches!(parse_edit_commands("move 3 r=quat(1,1,0,0) t=(0,0,0)"), Err(ProtocolError::InvalidTransform { .. })));
        assert!(matches!(parse_edit_commands("move 3 s=2"), Err(ProtocolError::Parse { .. })));
        assert!(matches!(parse_edit_commands("teleport 3"), Err(ProtocolError::Parse { column: 1, .. })));

        let text = "move 1 s=1.5 r=quat(0.7071067811865476,0,0.7071067811865476,0) t=(1,2,3)\nreplace 2 file=\"a b.ply\"\naddedge alignment(1,2) axes=xz\ndropedge 0\n";
        let cmds = parse_edit_commands(text).unwrap();
        let again: String = cmds.iter().map(|c| format!("{c}\n")).collect();
        assert_eq!(parse_edit_commands(&again).unwrap().len(), 4);
    }

    #[test]
    fn move_shifts_aabb_and_leaves_others() {
        let ctx = scene();
        let before = serialize_readout(&ctx, None).unwrap();
        let out = apply_edits(&ctx, &parse_edit_commands("move 2 t=(0.5,0,0)").unwrap()).unwrap();
        let after = serialize_readout(&out, None).unwrap();
        let (a, b) = (before.instance_table[1].aabb.unwrap(), after.instance_table[1].aabb.unwrap());
        assert!((b.min - a.min - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        assert_eq!(before.instance_table[0], after.instance_table[0]);
        for (p, q) in ctx.cloud.points.iter().zip(&out.cloud.points) {
            if p.label != 2 {
                assert_eq!(p, q);
            }
        }
        let back = apply_edits(&out, &parse_edit_commands("move 2 t=(-0.5,0,0)").unwrap()).unwrap();
        for (p, q) in ctx.cloud.points.iter().zip(&back.cloud.points) {
            assert!((p.position - q.position).norm() < 1e-9);
        }
    }

    #[test]
    fn edits_are_atomic() {
        let ctx = scene();
        assert_eq!(apply_edits(&ctx, &[]).unwrap(), ctx);
        let bad = parse_edit_commands("move 1 t=(1,0,0)\nmove 9 t=(1,0,0)").unwrap();
        assert_eq!(apply_edits(&ctx, &bad), Err(ProtocolError::UnknownInstance(9)));
        let dangling = parse_edit_commands("move 1 t=(1,0,0)\naddedge contact(1,7)").unwrap();
        assert!(matches!(apply_edits(&ctx, &dangling), Err(ProtocolError::ValidationFailed(_))));
        assert_eq!(apply_edits(&ctx, &parse_edit_commands("dropedge 3").unwrap()), Err(ProtocolError::UnknownEdge(3)));
    }

    #[test]
    fn replace_changes_counts() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bed.ply");
        let repl = LabeledPointCloud::new((0..25).map(|k| LabeledPoint::new(Vec3::new(k as f64, 0.0, 0.0), [0.0; 3], 1)).collect());
        save_cloud(&repl, &file).unwrap();
        let ctx = scene();
        let mut cmds = parse_edit_commands("replace 1 file=bed.ply").unwrap();
        rebase_paths(&mut cmds, dir.path());
        let out = apply_edits(&ctx, &cmds).unwrap();
        assert_eq!(out.cloud.len(), ctx.cloud.len() - 10 + 25);
        let wrong = LabeledPointCloud::new(vec![LabeledPoint::new(Vec3::zeros(), [0.0; 3], 2)]);
        save_cloud(&wrong, &file).unwrap();
        assert!(matches!(apply_edits(&ctx, &cmds), Err(ProtocolError::ValidationFailed(_))));
    }

    #[test]
    fn readout_is_deterministic() {
        let ctx = scene();
        let a = serialize_readout(&ctx, None).unwrap();
        assert_eq!(a.instance_table.iter().map(|r| r.id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(a.to_text(), serialize_readout(&ctx, None).unwrap().to_text());
        assert_eq!(parse_hypergraph(&a.hypergraph_text).unwrap(), ctx.graph);
        let mut broken = ctx.clone();
        broken.graph.add_node(5, "ghost");
        assert!(matches!(serialize_readout(&broken, None), Err(ProtocolError::ValidationFailed(_))));

        let dir = tempfile::tempdir().unwrap();
        let doc = serialize_readout(&ctx, Some(&ViewOptions { resolution: 32, ..ViewOptions::new(dir.path()) })).unwrap();
        assert_eq!(doc.view_refs.len(), 12);
        assert!(doc.view_refs.iter().all(|p| p.is_relative() && dir.path().join(p).exists()));
    }

    #[test]
    fn stub_sessions() {
        let ctx = scene();
        let (out, t) = run_stub_session(&mut ScriptedAgent::default(), &ctx).unwrap();
        assert_eq!(out, ctx);
        assert_eq!((t.readouts(), t.responses()), (1, 0));

        let script = "# two batches\nmove 1 t=(0,1,0)\nend\n\naddedge clearance(2) dmin=0.3\nend\n";
        let mut agent = ScriptedAgent::parse_script(script).unwrap();
        let (_, t) = run_stub_session(&mut agent, &ctx).unwrap();
        assert_eq!((t.readouts(), t.responses()), (3, 2));
        let (_, t2) = run_stub_session(&mut ScriptedAgent::parse_script(script).unwrap(), &ctx).unwrap();
        assert_eq!(t.to_text(), t2.to_text());

        assert!(matches!(ScriptedAgent::parse_script("move 1 t=(0,0,0)\n"), Err(ProtocolError::ScriptExhausted(_))));
        let err = run_stub_session(&mut ScriptedAgent::parse_script("move 9 t=(0,0,0)\nend\n").unwrap(), &ctx).unwrap_err();
        assert_eq!(err.error, ProtocolError::UnknownInstance(9));
        assert_eq!(err.transcript.responses(), 1);
    }
}

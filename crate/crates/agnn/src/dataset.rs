//! Plain-text dataset files.
//!
//! One graph per file:
//!
//! ```text
//! nodes=<N> feats=<F> classes=<C> multilabel=<0|1>
//! <N feature lines of F decimals>
//! <N label lines: class id (-1 = unlabeled) or C values of 0/1>
//! <N mask lines: train|val|test|none>
//! edges
//! <i j pairs, 0-based, one per line>
//! ```
//!
//! An inductive dataset is a directory of such files plus `roles.txt`, whose
//! lines are `<file name> <train|val|test>`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use agnn_core::graph::{DatasetBundle, EdgeReport, Graph, Labels, Setting, Split};
use agnn_core::tensor::Tensor;

pub const ROLES_FILE: &str = "roles.txt";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Invalid { path: String, source: agnn_core::Error },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

/// Edge cleanup counters summed over every loaded graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub graphs: usize,
    pub edges: EdgeReport,
}

impl LoadReport {
    fn add(&mut self, r: EdgeReport) {
        self.graphs += 1;
        self.edges.symmetrized += r.symmetrized;
        self.edges.duplicates += r.duplicates;
        self.edges.self_loops += r.self_loops;
    }
}

struct Header {
    nodes: usize,
    feats: usize,
    classes: usize,
    multi: bool,
}

struct Lines<'a> {
    path: &'a str,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, msg: impl Into<String>) -> DatasetError {
        DatasetError::Parse {
            path: self.path.to_string(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str, DatasetError> {
        match self.iter.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l.trim())
            }
            None => {
                self.line += 1;
                Err(self.err(format!("unexpected end of file, expected {}", what)))
            }
        }
    }
}

fn parse_header(lines: &mut Lines) -> Result<Header, DatasetError> {
    let text = lines.next("header")?;
    let (mut nodes, mut feats, mut classes, mut multi) = (None, None, None, None);
    for field in text.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| lines.err(format!("header field `{}` is not key=value", field)))?;
        let n: usize = v.parse().map_err(|_| lines.err(format!("header value `{}` for {} is not a count", v, k)))?;
        let slot = match k {
            "nodes" => &mut nodes,
            "feats" => &mut feats,
            "classes" => &mut classes,
            "multilabel" => &mut multi,
            _ => return Err(lines.err(format!("unknown header key `{}`", k))),
        };
        if slot.replace(n).is_some() {
            return Err(lines.err(format!("header key `{}` repeated", k)));
        }
    }
    let need = |v: Option<usize>, k: &str| v.ok_or_else(|| lines.err(format!("header lacks `{}`", k)));
    let header = Header {
        nodes: need(nodes, "nodes")?,
        feats: need(feats, "feats")?,
        classes: need(classes, "classes")?,
        multi: match need(multi, "multilabel")? {
            0 => false,
            1 => true,
            m => return Err(lines.err(format!("multilabel must be 0 or 1, got {}", m))),
        },
    };
    if header.classes == 0 {
        return Err(lines.err("classes must be positive"));
    }
    Ok(header)
}

fn parse_mask(lines: &Lines, text: &str, node: usize) -> Result<Option<Split>, DatasetError> {
    let mut found: Option<Split> = None;
    for tag in text.split(|c: char| c.is_whitespace() || c == ',' || c == '|').filter(|t| !t.is_empty()) {
        let split = match tag {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            "none" => continue,
            _ => return Err(lines.err(format!("unknown mask `{}`", tag))),
        };
        match found {
            Some(prev) if prev != split => {
                return Err(lines.err(format!("masks overlap: node {} is both {} and {}", node, prev.name(), split.name())))
            }
            _ => found = Some(split),
        }
    }
    if found.is_none() && !text.split(|c: char| c.is_whitespace() || c == ',' || c == '|').any(|t| t == "none") {
        return Err(lines.err("empty mask line"));
    }
    Ok(found)
}

/// Parses one graph file's contents; `path` is used in error messages only.
pub fn parse_graph(text: &str, path: &str) -> Result<(Graph, EdgeReport), DatasetError> {
    let mut lines = Lines {
        path,
        iter: text.lines().enumerate(),
        line: 0,
    };
    let h = parse_header(&mut lines)?;

    let mut feats = Vec::with_capacity(h.nodes * h.feats);
    for i in 0..h.nodes {
        let l = lines.next("feature line")?;
        let before = feats.len();
        for tok in l.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| lines.err(format!("feature `{}` of node {} is not a number", tok, i)))?;
            if !v.is_finite() {
                return Err(lines.err(format!("feature of node {} is not finite", i)));
            }
            feats.push(v);
        }
        if feats.len() - before != h.feats {
            return Err(lines.err(format!("node {} has {} features, header says {}", i, feats.len() - before, h.feats)));
        }
    }

    let labels = if h.multi {
        let mut rows = Vec::with_capacity(h.nodes);
        for i in 0..h.nodes {
            let l = lines.next("label line")?;
            let row = l
                .split_whitespace()
                .map(|t| match t {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    _ => Err(lines.err(format!("label bit `{}` of node {} is not 0 or 1", t, i))),
                })
                .collect::<Result<Vec<bool>, _>>()?;
            if row.len() != h.classes {
                return Err(lines.err(format!("node {} has {} label bits, header says {}", i, row.len(), h.classes)));
            }
            rows.push(row);
        }
        Labels::Multi(rows)
    } else {
        let mut ids = Vec::with_capacity(h.nodes);
        for i in 0..h.nodes {
            let l = lines.next("label line")?;
            let v: i64 = l.parse().map_err(|_| lines.err(format!("label `{}` of node {} is not an integer", l, i)))?;
            ids.push(match v {
                -1 => None,
                c if c >= 0 && (c as usize) < h.classes => Some(c as usize),
                c => return Err(lines.err(format!("label {} of node {} outside 0..{}", c, i, h.classes))),
            });
        }
        Labels::Single(ids)
    };

    let mut masks: [Vec<bool>; 3] = [vec![false; h.nodes], vec![false; h.nodes], vec![false; h.nodes]];
    for i in 0..h.nodes {
        let l = lines.next("mask line")?;
        if let Some(split) = parse_mask(&lines, l, i)? {
            if !labels.has_label(i) {
                return Err(lines.err(format!("node {} is in the {} mask but unlabeled", i, split.name())));
            }
            masks[split as usize][i] = true;
        }
    }

    if lines.next("`edges` line")? != "edges" {
        return Err(lines.err("expected `edges`"));
    }
    let mut edges = Vec::new();
    while let Ok(l) = lines.next("edge") {
        if l.is_empty() {
            continue;
        }
        let mut it = l.split_whitespace();
        let node = |it: &mut std::str::SplitWhitespace| -> Result<usize, DatasetError> {
            let t = it.next().ok_or_else(|| lines.err("edge line needs two node ids"))?;
            let v: usize = t.parse().map_err(|_| lines.err(format!("node id `{}` is not a count", t)))?;
            if v >= h.nodes {
                return Err(lines.err(format!("node id {} >= {}", v, h.nodes)));
            }
            Ok(v)
        };
        let a = node(&mut it)?;
        let b = node(&mut it)?;
        if it.next().is_some() {
            return Err(lines.err("edge line has more than two fields"));
        }
        edges.push((a, b));
    }

    let features = Tensor::matrix(h.nodes, h.feats, feats).map_err(|source| DatasetError::Invalid {
        path: path.to_string(),
        source,
    })?;
    Graph::new(h.nodes, &edges, features, labels, h.classes, masks).map_err(|source| DatasetError::Invalid {
        path: path.to_string(),
        source,
    })
}

/// Renders a graph in the text format. Each undirected edge is written once
/// as `i j` with `i < j`; floats use the shortest exact representation.
pub fn format_graph(g: &Graph) -> String {
    let mut s = String::new();
    let n = g.num_nodes();
    let multi = g.labels().is_multi();
    let _ = writeln!(s, "nodes={} feats={} classes={} multilabel={}", n, g.feat_dim(), g.num_classes(), multi as u8);
    for i in 0..n {
        let row: Vec<String> = g.features().row(i).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    match g.labels() {
        Labels::Single(ids) => {
            for id in ids {
                let _ = writeln!(s, "{}", id.map_or(-1, |c| c as i64));
            }
        }
        Labels::Multi(rows) => {
            for row in rows {
                let bits: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
                let _ = writeln!(s, "{}", bits.join(" "));
            }
        }
    }
    for i in 0..n {
        let tag = Split::ALL.iter().find(|&&sp| g.mask(sp)[i]).map_or("none", |sp| sp.name());
        let _ = writeln!(s, "{}", tag);
    }
    s.push_str("edges\n");
    for (a, b) in g.edges() {
        if a < b {
            let _ = writeln!(s, "{} {}", a, b);
        }
    }
    s
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_graph(path: &Path) -> Result<(Graph, EdgeReport), DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_graph(&text, &path.display().to_string())
}

/// Loads a single-file (transductive) or directory (inductive) dataset.
pub fn load_dataset(path: &Path) -> Result<(DatasetBundle, LoadReport), DatasetError> {
    let mut report = LoadReport::default();
    if !path.is_dir() {
        let (g, r) = load_graph(path)?;
        report.add(r);
        return Ok((DatasetBundle::transductive(g), report));
    }
    let roles_path = path.join(ROLES_FILE);
    let text = fs::read_to_string(&roles_path).map_err(io_err(&roles_path))?;
    let shown = roles_path.display().to_string();
    let mut graphs = Vec::new();
    let mut roles = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let l = l.trim();
        if l.is_empty() {
            continue;
        }
        let err = |msg: String| DatasetError::Parse {
            path: shown.clone(),
            line: i + 1,
            msg,
        };
        let (file, role) = l
            .rsplit_once(char::is_whitespace)
            .ok_or_else(|| err(format!("expected `<file> <role>`, got `{}`", l)))?;
        let role = match role {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            _ => return Err(err(format!("unknown role `{}`", role))),
        };
        let (g, r) = load_graph(&path.join(file.trim()))?;
        report.add(r);
        graphs.push(g);
        roles.push(role);
    }
    let bundle = DatasetBundle::inductive(graphs, roles).map_err(|source| DatasetError::Invalid { path: shown, source })?;
    Ok((bundle, report))
}

/// Writes `bundle` so that [`load_dataset`] reads it back: a file for
/// transductive data, a directory of `graph<k>.txt` plus `roles.txt` otherwise.
pub fn save_dataset(bundle: &DatasetBundle, path: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    match bundle.setting {
        Setting::Transductive => {
            fs::write(path, format_graph(&bundle.graphs[0])).map_err(io_err(path))?;
            Ok(vec![path.to_path_buf()])
        }
        Setting::Inductive => {
            fs::create_dir_all(path).map_err(io_err(path))?;
            let mut roles = String::new();
            let mut written = Vec::new();
            for (k, (g, role)) in bundle.graphs.iter().zip(&bundle.roles).enumerate() {
                let name = format!("graph{}.txt", k);
                let file = path.join(&name);
                fs::write(&file, format_graph(g)).map_err(io_err(&file))?;
                let _ = writeln!(roles, "{} {}", name, role.name());
                written.push(file);
            }
            let roles_path = path.join(ROLES_FILE);
            fs::write(&roles_path, roles).map_err(io_err(&roles_path))?;
            written.push(roles_path);
            Ok(written)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use agnn_core::graph::{degrees, generate_inductive_sbm, generate_sbm, SbmConfig};

    const TRIANGLE: &str = "nodes=3 feats=2 classes=2 multilabel=0\n1 0\n0 1\n0.5 0.5\n0\n1\n0\ntrain\nval\ntest\nedges\n0 1\n1 2\n2 0\n";

    fn line_of(e: DatasetError) -> usize {
        match e {
            DatasetError::Parse { line, .. } => line,
            other => panic!("expected a parse error, got {other}"),
        }
    }

    #[test]
    fn triangle_has_degree_two() {
        let (g, _) = parse_graph(TRIANGLE, "t").unwrap();
        assert_eq!(degrees(&g), vec![2, 2, 2]);
        assert_eq!(g.split_nodes(Split::Val), vec![1]);
    }

    #[test]
    fn single_direction_edge_is_symmetrized() {
        let text = "nodes=3 feats=1 classes=1 multilabel=0\n0\n0\n0\n0\n0\n0\nnone\nnone\nnone\nedges\n1 2\n";
        let (g, report) = parse_graph(text, "t").unwrap();
        assert_eq!(g.neighbors(1), &[2]);
        assert_eq!(g.neighbors(2), &[1]);
        assert_eq!(report.symmetrized, 1);
    }

    #[test]
    fn overlapping_masks_are_rejected() {
        let text = TRIANGLE.replace("train\nval", "train val\nval");
        let err = parse_graph(&text, "t").unwrap_err();
        assert!(err.to_string().contains("masks overlap"), "{err}");
        assert_eq!(line_of(err), 8);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(line_of(parse_graph(&TRIANGLE.replace("0 1\n0.5", "0 x\n0.5"), "t").unwrap_err()), 3);
        assert_eq!(line_of(parse_graph(&TRIANGLE.replace("2 0\n", "2 7\n"), "t").unwrap_err()), 14);
        assert_eq!(line_of(parse_graph(&TRIANGLE.replace("edges", "edgez"), "t").unwrap_err()), 11);
        assert_eq!(line_of(parse_graph("nodes=3 feats=2 classes=2\n", "t").unwrap_err()), 1);
        assert_eq!(line_of(parse_graph("nodes=2 feats=1 classes=2 multilabel=0\n1\n", "t").unwrap_err()), 3);
        let unlabeled = TRIANGLE.replace("0\n1\n0\ntrain", "0\n-1\n0\ntrain");
        assert_eq!(line_of(parse_graph(&unlabeled, "t").unwrap_err()), 9);
    }

    #[test]
    fn multilabel_round_trip() {
        let text = "nodes=2 feats=1 classes=3 multilabel=1\n0.25\n-0.001\n1 0 1\n0 0 0\ntrain\ntest\nedges\n0 1\n";
        let (g, _) = parse_graph(text, "t").unwrap();
        assert_eq!(format_graph(&g), text);
    }

    #[test]
    fn sbm_round_trip_is_exact() {
        let cfg = SbmConfig {
            nodes: 60,
            classes: 3,
            p_in: 0.3,
            p_out: 0.02,
            feat_dim: 5,
            noise: 0.3,
            seed: 11,
        };
        let g = &generate_sbm(&cfg).unwrap().graphs[0];
        let text = format_graph(g);
        let (back, report) = parse_graph(&text, "t").unwrap();
        assert_eq!(&back, g);
        assert_eq!(report.symmetrized, g.num_edges());
        assert_eq!((report.duplicates, report.self_loops), (0, 0));
        assert_eq!(format_graph(&back), text);
    }

    #[test]
    fn inductive_directory_round_trip() {
        let cfg = SbmConfig {
            nodes: 20,
            classes: 2,
            p_in: 0.4,
            p_out: 0.05,
            feat_dim: 3,
            noise: 0.1,
            seed: 2,
        };
        let bundle = generate_inductive_sbm(&cfg, 2, 1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ppi");
        save_dataset(&bundle, &path).unwrap();
        let (back, report) = load_dataset(&path).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(report.graphs, 4);
    }
}

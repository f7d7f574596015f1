//! Graphviz export of abstracted policy graphs.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::apg::Apg;

fn node_name(apg: &Apg, id: usize) -> String {
    if id == apg.terminal_id() {
        "END".to_string()
    } else {
        format!("b{id}")
    }
}

/// Renders one node per abstract state (`b<id>\na<action>`), the terminal
/// node as `END`, and every nonzero edge labelled with its probability to
/// three decimals. Output depends only on the graph.
pub fn to_dot(apg: &Apg) -> String {
    let mut out = String::new();
    writeln!(out, "digraph apg {{").unwrap();
    writeln!(out, "    node [shape=ellipse];").unwrap();
    for node in apg.nodes() {
        writeln!(out, "    b{id} [label=\"b{id}\\na{a}\"];", id = node.id, a = node.action.id()).unwrap();
    }
    writeln!(out, "    END [label=\"END\", shape=doublecircle];").unwrap();
    for (from, to, p) in apg.edges() {
        writeln!(
            out,
            "    {} -> {} [label=\"{:.3}\"];",
            node_name(apg, from),
            node_name(apg, to),
            p
        )
        .unwrap();
    }
    writeln!(out, "}}").unwrap();
    out
}

pub fn export_dot(apg: &Apg, path: impl AsRef<Path>) -> io::Result<()> {
    fs::write(path, to_dot(apg))
}

//! ASCII Wavefront OBJ, vertices and triangles only (`v x y z`, `f i j k`,
//! 1-based indices).

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Renders a mesh as OBJ text. Coordinates are written at `f32` precision
/// using the shortest round-trip representation.
pub fn to_obj_string(vertices: &Matrix, faces: &[[usize; 3]]) -> String {
    let mut s = String::with_capacity(vertices.rows() * 32 + faces.len() * 16);
    for r in 0..vertices.rows() {
        let v = vertices.row(r);
        let _ = writeln!(s, "v {} {} {}", v[0] as f32, v[1] as f32, v[2] as f32);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj<W: Write>(mut w: W, vertices: &Matrix, faces: &[[usize; 3]]) -> Result<()> {
    w.write_all(to_obj_string(vertices, faces).as_bytes())?;
    Ok(())
}

/// Parses `v` and `f` records; other record types are ignored. Face entries
/// of the form `i/j/k` use the vertex index only.
pub fn read_obj<R: BufRead>(r: R) -> Result<(Matrix, Vec<[usize; 3]>)> {
    let mut verts: Vec<[f64; 3]> = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        let bad = |what: &str| Error::Format(format!("obj line {}: {what}", lineno + 1));
        match it.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for c in &mut p {
                    *c = it
                        .next()
                        .ok_or_else(|| bad("short vertex"))?
                        .parse()
                        .map_err(|_| bad("bad coordinate"))?;
                }
                verts.push(p);
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|tok| {
                        let head = tok.split('/').next().unwrap_or(tok);
                        head.parse::<usize>().map_err(|_| bad("bad index"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err(bad("faces must be 1-based triangles"));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= verts.len())) {
        return Err(Error::Format(format!("face {f:?} references a missing vertex")));
    }
    Ok((Matrix::from_rows(&verts), faces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::MeshTemplate;

    #[test]
    fn rest_template_round_trips() {
        let t = MeshTemplate::default();
        let text = to_obj_string(&t.v_tpose, &t.faces);
        let (v, f) = read_obj(text.as_bytes()).unwrap();
        assert_eq!(f, t.faces);
        for (a, b) in v.as_slice().iter().zip(t.v_tpose.as_slice()) {
            assert_eq!(*a as f32, *b as f32);
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        // Exporting the re-imported mesh yields identical text.
        assert_eq!(to_obj_string(&v, &f), text);
    }

    #[test]
    fn rejects_bad_faces() {
        assert!(read_obj("v 0 0 0\nf 1 2 3\n".as_bytes()).is_err());
        assert!(read_obj("v 0 0 0\nf 0 1 1\n".as_bytes()).is_err());
        assert!(read_obj("v 0 0\n".as_bytes()).is_err());
    }

    #[test]
    fn slash_indices_are_accepted() {
        let (v, f) = read_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1 2/2 3/3\n".as_bytes()).unwrap();
        assert_eq!(v.rows(), 3);
        assert_eq!(f, vec![[0, 1, 2]]);
    }
}

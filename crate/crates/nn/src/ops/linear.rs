use crate::error::{shape_err, Result};
use crate::gemm::{gemm, MatRef};
use crate::graph::{Graph, Operation, Var};

struct Linear {
    x: Var,
    w: Var,
    b: Option<Var>,
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Operation for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(&self, graph: &Graph, _: Var, g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (n, i, o) = (self.rows, self.fan_in, self.fan_out);
        let dy = MatRef::row_major(g, n, o);
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; n * i];
            gemm(1.0, dy, MatRef::row_major(graph.data(self.w), i, o).t(), 0.0, &mut dx);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; i * o];
            gemm(1.0, MatRef::row_major(graph.data(self.x), n, i).t(), dy, 0.0, &mut dw);
            dw
        });
        let mut out = vec![dx, dw];
        if self.b.is_some() {
            out.push(needs[2].then(|| {
                let mut db = vec![0.0f64; o];
                for row in g.chunks_exact(o) {
                    db.iter_mut().zip(row).for_each(|(a, &b)| *a += f64::from(b));
                }
                db.into_iter().map(|v| v as f32).collect()
            }));
        }
        out
    }
}

impl Graph {
    /// Affine map over the last axis: `y = x · w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [fan_in, fan_out] = ws[..] else {
            return shape_err("linear", "weight of rank 2", ws);
        };
        if xs.last() != Some(&fan_in) {
            return shape_err("linear", format!("input [.., {fan_in}]"), xs);
        }
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return shape_err("linear", [fan_out], self.shape(b));
            }
        }
        let rows = self.value(x).len() / fan_in;
        let mut data = vec![0.0; rows * fan_out];
        if let Some(b) = b {
            for row in data.chunks_exact_mut(fan_out) {
                row.copy_from_slice(self.data(b));
            }
        }
        gemm(
            1.0,
            MatRef::row_major(self.data(x), rows, fan_in),
            MatRef::row_major(self.data(w), fan_in, fan_out),
            1.0,
            &mut data,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = fan_out;
        Ok(self.push_op(shape, data, Box::new(Linear { x, w, b, rows, fan_in, fan_out })))
    }
}

use depthkit::{Shape, Tape, Tensor};
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = [usize; 4]> {
    [1usize..3, 1usize..4, 1usize..5, 1usize..6]
}

fn tensor(s: [usize; 4]) -> impl Strategy<Value = Tensor> {
    let n: usize = s.iter().product();
    prop::collection::vec(-10.0f32..10.0, n).prop_map(move |d| Tensor::from_vec(s, d).unwrap())
}

proptest! {
    #[test]
    fn from_vec_rejects_wrong_length(s in shape(), extra in 1usize..4) {
        let n: usize = s.iter().product();
        prop_assert!(Tensor::from_vec(s, vec![0.0; n + extra]).is_err());
        prop_assert!(Tensor::from_vec(s, vec![0.0; n]).is_ok());
    }

    #[test]
    fn indexing_matches_row_major_layout(t in shape().prop_flat_map(tensor)) {
        let [n, c, h, w] = t.shape().0;
        let st = t.shape().strides();
        for i in 0..n {
            for k in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        prop_assert_eq!(t.at(i, k, y, x), t.data()[i * st[0] + k * st[1] + y * st[2] + x]);
                    }
                }
            }
        }
    }

    #[test]
    fn hflip_is_an_involution(t in shape().prop_flat_map(tensor)) {
        let f = t.hflip();
        let back = f.hflip();
        prop_assert_eq!(back.data(), t.data());
        let [_, _, _, w] = t.shape().0;
        prop_assert_eq!(f.at(0, 0, 0, 0), t.at(0, 0, 0, w - 1));
    }

    #[test]
    fn stack_then_split_round_trips(t in shape().prop_flat_map(tensor)) {
        let items: Vec<Tensor> = (0..t.shape().n()).map(|i| t.batch_item(i)).collect();
        let back = Tensor::stack(&items).unwrap();
        prop_assert_eq!(back.data(), t.data());
        prop_assert_eq!(back.shape(), t.shape());
    }

    #[test]
    fn broadcast_is_symmetric_and_absorbs_ones(a in shape(), mask in [any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()]) {
        let mut b = a;
        for i in 0..4 {
            if mask[i] {
                b[i] = 1;
            }
        }
        let (sa, sb) = (Shape(a), Shape(b));
        prop_assert_eq!(Shape::broadcast(sa, sb), Some(sa));
        prop_assert_eq!(Shape::broadcast(sb, sa), Some(sa));
    }

    #[test]
    fn broadcast_add_then_sum_to_matches_repeat_count(a in shape().prop_flat_map(tensor)) {
        // Adding a per-channel bias and reducing back gives each bias element
        // a gradient equal to the number of positions it was broadcast to.
        let [n, c, h, w] = a.shape().0;
        let mut tape = Tape::new();
        let x = tape.leaf(a.clone().with_grad()).unwrap();
        let b = tape.leaf(Tensor::zeros([1, c, 1, 1]).with_grad()).unwrap();
        let y = tape.add(x, b).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let gb = tape.grad(b).unwrap();
        prop_assert!(gb.data().iter().all(|&g| g == (n * h * w) as f32));
        prop_assert!((tape.value(s).item() as f64 - a.sum()).abs() < 1e-3 * (1.0 + a.sum().abs()));
    }
}

#[test]
fn broadcast_rejects_mismatched_dims() {
    assert_eq!(
        Shape::broadcast(Shape([1, 2, 3, 4]), Shape([1, 3, 3, 4])),
        None
    );
}

#[test]
fn non_finite_detection() {
    let mut t = Tensor::ones([1, 1, 2, 2]);
    assert!(t.all_finite());
    t.set(0, 0, 1, 1, f32::NAN);
    assert!(!t.all_finite());
}

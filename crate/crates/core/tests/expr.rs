use proptest::prelude::*;
use snctl_core::expr::{parse_expr, BinOp, Expression, Func, Node, SPACE_TIME_VARS};

fn node() -> impl Strategy<Value = Node> {
    let leaf = prop_oneof![
        (0.0f64..1e6).prop_map(Node::Num),
        (0usize..3).prop_map(Node::Var),
        (-20i32..20).prop_map(|e| Node::Num(10f64.powi(e))),
    ];
    leaf.prop_recursive(5, 40, 2, |inner| {
        let op = prop_oneof![
            Just(BinOp::Add),
            Just(BinOp::Sub),
            Just(BinOp::Mul),
            Just(BinOp::Div),
            Just(BinOp::Pow)
        ];
        prop_oneof![
            inner.clone().prop_map(|e| Node::Neg(Box::new(e))),
            (op, inner.clone(), inner.clone()).prop_map(|(o, a, b)| Node::Bin(o, Box::new(a), Box::new(b))),
            (0usize..5, inner).prop_map(|(f, e)| Node::Call(Func::ALL[f], Box::new(e))),
        ]
    })
}

fn wrap(root: Node) -> Expression {
    Expression {
        root,
        vars: SPACE_TIME_VARS.iter().map(|s| s.to_string()).collect(),
        source: String::new(),
    }
}

proptest! {
    #[test]
    fn print_parse_round_trip(root in node()) {
        let e = wrap(root);
        let text = e.normalized();
        let back = parse_expr(&text).unwrap();
        prop_assert_eq!(&back.root, &e.root);
        prop_assert_eq!(back.normalized(), text);
    }

    #[test]
    fn evaluation_is_total(root in node(), x in -10.0f64..10.0, y in -10.0f64..10.0, t in 0.0f64..1.0) {
        let e = wrap(root);
        let v = e.eval(&[x, y, t]);
        let again = parse_expr(&e.normalized()).unwrap().eval(&[x, y, t]);
        prop_assert!(v.to_bits() == again.to_bits() || (v.is_nan() && again.is_nan()));
    }

    #[test]
    fn garbage_never_panics(s in "[ -~]{0,24}") {
        let _ = parse_expr(&s);
    }
}

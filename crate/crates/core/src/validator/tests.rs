use proptest::prelude::*;

use super::*;
use crate::catalog::PrivacyPolicy;
use crate::eval::{tpch_catalog, tpch_workload};

fn codes(sql: &str) -> Vec<ErrorCode> {
    match check_sql(sql, &tpch_catalog()) {
        Ok(_) => Vec::new(),
        Err(Rejection::Invalid(errors)) => errors.into_iter().map(|e| e.code).collect(),
        Err(Rejection::Syntax(e)) => panic!("{sql}: unexpected syntax error {e}"),
    }
}

#[test]
fn workload_queries_validate() {
    let catalog = tpch_catalog();
    let workload = tpch_workload();
    assert_eq!(workload.len(), 10);
    for q in workload {
        if let Err(e) = check_sql(&q.sql, &catalog) {
            panic!("{}: {e}", q.name);
        }
    }
}

pub(crate) const FORBIDDEN: &[(&str, ErrorCode)] = &[
    ("SELECT c_name FROM customer", ErrorCode::NonAggregateOutput),
    ("SELECT c_name, COUNT(*) FROM customer", ErrorCode::NonAggregateOutput),
    ("SELECT c_mktsegment FROM customer GROUP BY c_mktsegment", ErrorCode::NonAggregateOutput),
    ("SELECT COUNT(*) FROM (SELECT * FROM customer) t", ErrorCode::NestedSubquery),
    ("SELECT MEDIAN(c_acctbal) FROM customer", ErrorCode::UnsupportedAggregate),
    ("SELECT MAX(o_totalprice) FROM orders", ErrorCode::UnsupportedAggregate),
    ("SELECT SUM(l_quantity) FROM lineitem", ErrorCode::MissingPrivacyUnit),
    ("SELECT SUM(c_balance) FROM customer", ErrorCode::UnknownColumn),
    ("SELECT COUNT(*) FROM supplier", ErrorCode::UnknownTable),
    ("SELECT SUM(c_nationkey) FROM customer", ErrorCode::MissingClampBounds),
    ("SELECT AVG(c_mktsegment) FROM customer", ErrorCode::MissingClampBounds),
    ("SELECT COUNT(*) FROM customer LIMIT 5", ErrorCode::UnsupportedSyntax),
    ("SELECT COUNT(*) FROM customer ORDER BY 1", ErrorCode::UnsupportedSyntax),
    (
        "SELECT c_mktsegment, COUNT(*) FROM customer GROUP BY c_mktsegment HAVING COUNT(*) > 3",
        ErrorCode::UnsupportedSyntax,
    ),
    ("SELECT COUNT(*) OVER () FROM customer", ErrorCode::UnsupportedSyntax),
    ("SELECT COUNT(*) FROM customer UNION SELECT COUNT(*) FROM orders", ErrorCode::UnsupportedSyntax),
    ("SELECT COUNT(*) FROM orders JOIN customer ON o_totalprice = c_acctbal", ErrorCode::UnsupportedSyntax),
    ("SELECT COUNT(*) FROM orders LEFT JOIN customer ON o_custkey = c_custkey", ErrorCode::UnsupportedSyntax),
    (
        "SELECT COUNT(*) FROM customer WHERE c_custkey IN (SELECT o_custkey FROM orders)",
        ErrorCode::UnsupportedSyntax,
    ),
];

#[test]
fn forbidden_queries_reject_with_expected_code() {
    for (sql, expected) in FORBIDDEN {
        let got = codes(sql);
        assert_eq!(got.first(), Some(expected), "{sql}: {got:?}");
    }
}

#[test]
fn cte_over_base_table_is_accepted() {
    assert!(codes("WITH t AS (SELECT * FROM customer) SELECT COUNT(*) FROM t").is_empty());
}

#[test]
fn all_violations_are_reported() {
    let got = codes("SELECT c_name, MEDIAN(c_acctbal), SUM(c_nope) FROM customer");
    assert!(got.contains(&ErrorCode::NonAggregateOutput));
    assert!(got.contains(&ErrorCode::UnsupportedAggregate));
    assert!(got.contains(&ErrorCode::UnknownColumn));
}

#[test]
fn misspelled_keyword_is_syntax_error_at_start() {
    match check_sql("SELEC COUNT(*)", &tpch_catalog()) {
        Err(Rejection::Syntax(e)) => assert_eq!(e.offset, 0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn spans_point_into_the_text() {
    let sql = "SELECT c_name FROM customer";
    let Err(Rejection::Invalid(errors)) = check_sql(sql, &tpch_catalog()) else {
        panic!()
    };
    assert_eq!(&sql[errors[0].span.start..errors[0].span.end], "c_name");
}

fn explained(name: &str) -> String {
    let q = tpch_workload().into_iter().find(|q| q.name == name).unwrap();
    explain(&check_sql(&q.sql, &tpch_catalog()).unwrap(), &PrivacyPolicy::default())
}

#[test]
fn explain_count() {
    let text = explained("COUNT");
    assert!(text.contains("aggregate: COUNT"), "{text}");
    assert!(text.contains("lineage: identity"), "{text}");
}

#[test]
fn explain_groupby_join_names_tables_and_key() {
    let text = explained("GROUPBY_JOIN");
    assert!(text.contains("orders") && text.contains("customer"), "{text}");
    assert!(text.contains("o_custkey") && text.contains("c_custkey"), "{text}");
}

#[test]
fn explain_covar_names_both_arguments() {
    let text = explained("COVAR");
    assert!(text.contains("l_extendedprice") && text.contains("l_discount"), "{text}");
}

#[test]
fn explain_is_deterministic() {
    for q in tpch_workload() {
        assert_eq!(explained(&q.name), explained(&q.name));
    }
}

// A small generator of queries over the benchmark catalog together with an
// independent statement of the rules each generated query must satisfy.

#[derive(Debug, Clone, Copy, PartialEq)]
enum Col {
    CustKey,
    Name,
    Nation,
    AcctBal,
    Segment,
    OrderKey,
    OCustKey,
    Status,
    TotalPrice,
    Quantity,
    Discount,
    Missing,
}

impl Col {
    fn sql(self) -> &'static str {
        match self {
            Col::CustKey => "c_custkey",
            Col::Name => "c_name",
            Col::Nation => "c_nationkey",
            Col::AcctBal => "c_acctbal",
            Col::Segment => "c_mktsegment",
            Col::OrderKey => "o_orderkey",
            Col::OCustKey => "o_custkey",
            Col::Status => "o_orderstatus",
            Col::TotalPrice => "o_totalprice",
            Col::Quantity => "l_quantity",
            Col::Discount => "l_discount",
            Col::Missing => "x_nothing",
        }
    }

    fn table(self) -> Option<&'static str> {
        match self {
            Col::CustKey | Col::Name | Col::Nation | Col::AcctBal | Col::Segment => Some("customer"),
            Col::OrderKey | Col::OCustKey | Col::Status | Col::TotalPrice => Some("orders"),
            Col::Quantity | Col::Discount => Some("lineitem"),
            Col::Missing => None,
        }
    }

    fn clamped(self) -> bool {
        matches!(self, Col::AcctBal | Col::TotalPrice | Col::Quantity | Col::Discount)
    }
}

const COLS: &[Col] = &[
    Col::CustKey,
    Col::Name,
    Col::Nation,
    Col::AcctBal,
    Col::Segment,
    Col::OrderKey,
    Col::OCustKey,
    Col::Status,
    Col::TotalPrice,
    Col::Quantity,
    Col::Discount,
    Col::Missing,
];

#[derive(Debug, Clone, Copy)]
enum From {
    Customer,
    Orders,
    OrdersCustomer,
    LineitemOrders,
    Lineitem,
    Derived,
    NonKeyJoin,
    Unknown,
}

impl From {
    fn sql(self) -> &'static str {
        match self {
            From::Customer => "customer",
            From::Orders => "orders",
            From::OrdersCustomer => "orders JOIN customer ON o_custkey = c_custkey",
            From::LineitemOrders => "lineitem JOIN orders ON l_orderkey = o_orderkey",
            From::Lineitem => "lineitem",
            From::Derived => "(SELECT * FROM customer) t",
            From::NonKeyJoin => "orders JOIN customer ON o_totalprice = c_acctbal",
            From::Unknown => "supplier",
        }
    }

    fn tables(self) -> &'static [&'static str] {
        match self {
            From::Customer | From::Derived => &["customer"],
            From::Orders => &["orders"],
            From::OrdersCustomer | From::NonKeyJoin => &["orders", "customer"],
            From::LineitemOrders => &["lineitem", "orders"],
            From::Lineitem => &["lineitem"],
            From::Unknown => &[],
        }
    }

    fn structurally_ok(self) -> bool {
        !matches!(self, From::Lineitem | From::Derived | From::NonKeyJoin | From::Unknown)
    }
}

#[derive(Debug, Clone, Copy)]
enum Item {
    CountStar,
    CountDistinct(Col),
    Numeric(&'static str, Col),
    Covar(Col, Col),
    Median(Col),
    Bare(Col),
}

impl Item {
    fn sql(self) -> String {
        match self {
            Item::CountStar => "COUNT(*)".into(),
            Item::CountDistinct(c) => format!("COUNT(DISTINCT {})", c.sql()),
            Item::Numeric(f, c) => format!("{f}({})", c.sql()),
            Item::Covar(a, b) => format!("COVAR({}, {})", a.sql(), b.sql()),
            Item::Median(c) => format!("MEDIAN({})", c.sql()),
            Item::Bare(c) => c.sql().into(),
        }
    }

    fn columns(self) -> Vec<Col> {
        match self {
            Item::CountStar => vec![],
            Item::CountDistinct(c) | Item::Numeric(_, c) | Item::Median(c) | Item::Bare(c) => vec![c],
            Item::Covar(a, b) => vec![a, b],
        }
    }
}

#[derive(Debug, Clone)]
struct Generated {
    items: Vec<Item>,
    from: From,
    filter: Option<Col>,
    group: Option<Col>,
    limit: bool,
}

impl Generated {
    fn sql(&self) -> String {
        let items: Vec<String> = self.items.iter().map(|i| i.sql()).collect();
        let mut s = format!("SELECT {} FROM {}", items.join(", "), self.from.sql());
        if let Some(c) = self.filter {
            s.push_str(&format!(" WHERE {} IS NOT NULL", c.sql()));
        }
        if let Some(c) = self.group {
            s.push_str(&format!(" GROUP BY {}", c.sql()));
        }
        if self.limit {
            s.push_str(" LIMIT 3");
        }
        s
    }

    /// The acceptance rules, restated over the generator's own description.
    fn oracle_accepts(&self) -> bool {
        let visible = |c: Col| c.table().is_some_and(|t| self.from.tables().contains(&t));
        let mut columns: Vec<Col> = self.items.iter().flat_map(|i| i.columns()).collect();
        columns.extend(self.filter);
        columns.extend(self.group);
        let outputs_ok = self.items.iter().all(|i| match i {
            Item::Bare(c) => self.group == Some(*c),
            Item::Median(_) => false,
            _ => true,
        });
        let has_aggregate = self.items.iter().any(|i| !matches!(i, Item::Bare(_)));
        let clamps_ok = self.items.iter().all(|i| match i {
            Item::Numeric(_, c) => c.clamped(),
            Item::Covar(a, b) => a.clamped() && b.clamped(),
            _ => true,
        });
        self.from.structurally_ok()
            && !self.limit
            && outputs_ok
            && has_aggregate
            && clamps_ok
            && columns.iter().all(|c| visible(*c))
    }
}

fn col() -> impl Strategy<Value = Col> {
    prop::sample::select(COLS)
}

fn item() -> impl Strategy<Value = Item> {
    prop_oneof![
        Just(Item::CountStar),
        col().prop_map(Item::CountDistinct),
        (prop::sample::select(&["SUM", "AVG", "VAR", "STDDEV"][..]), col()).prop_map(|(f, c)| Item::Numeric(f, c)),
        (col(), col()).prop_map(|(a, b)| Item::Covar(a, b)),
        col().prop_map(Item::Median),
        col().prop_map(Item::Bare),
    ]
}

fn generated() -> impl Strategy<Value = Generated> {
    let from = prop::sample::select(
        &[
            From::Customer,
            From::Orders,
            From::OrdersCustomer,
            From::LineitemOrders,
            From::Lineitem,
            From::Derived,
            From::NonKeyJoin,
            From::Unknown,
        ][..],
    );
    (
        prop::collection::vec(item(), 1..4),
        from,
        prop::option::weighted(0.3, col()),
        prop::option::weighted(0.4, col()),
        prop::bool::weighted(0.1),
    )
        .prop_map(|(items, from, filter, group, limit)| Generated {
            items,
            from,
            filter,
            group,
            limit,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn accepts_exactly_what_the_rules_allow(g in generated()) {
        let sql = g.sql();
        let accepted = check_sql(&sql, &tpch_catalog()).is_ok();
        prop_assert_eq!(accepted, g.oracle_accepts(), "{}", sql);
    }

    #[test]
    fn identical_text_gives_identical_outcome(g in generated()) {
        let sql = g.sql();
        let catalog = tpch_catalog();
        prop_assert_eq!(crate::sql::parse_sql(&sql), crate::sql::parse_sql(&sql));
        prop_assert_eq!(check_sql(&sql, &catalog), check_sql(&sql, &catalog));
    }
}

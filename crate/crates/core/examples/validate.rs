//! Static checking: accepted queries print their plan, rejected ones print
//! every violation with its byte span.

use dpsql::catalog::PrivacyPolicy;
use dpsql::eval::tpch_catalog;
use dpsql::validator::{check_sql, explain, Rejection};

fn main() {
    let catalog = tpch_catalog();
    let policy = PrivacyPolicy::default();
    let queries = [
        "SELECT c_mktsegment, AVG(o_totalprice) FROM orders JOIN customer ON o_custkey = c_custkey GROUP BY c_mktsegment",
        "SELECT c_name, COUNT(*) FROM customer",
        "SELECT MAX(c_acctbal) FROM customer",
        "SELECT COUNT(*) FROM customer LIMIT 5",
        "SELECT SUM(c_acctbal FROM customer",
    ];
    for sql in queries {
        println!("> {sql}");
        match check_sql(sql, &catalog) {
            Ok(plan) => print!("{}", explain(&plan, &policy)),
            Err(Rejection::Syntax(e)) => println!("SYNTAX_ERROR: {e}"),
            Err(Rejection::Invalid(errors)) => {
                for e in errors {
                    println!("{e}");
                }
            }
        }
        println!();
    }
}

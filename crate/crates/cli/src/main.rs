use std::collections::BTreeMap;

fn main() {
    let env: BTreeMap<String, String> = std::env::vars().collect();
    std::process::exit(scriptloop_cli::main_with(std::env::args_os(), &env));
}

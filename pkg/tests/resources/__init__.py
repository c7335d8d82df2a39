RESOURCES_ANCHOR = "tests.resources"
